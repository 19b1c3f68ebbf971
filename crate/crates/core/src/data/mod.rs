//! Datasets, generators, IDX/CSV IO and the two corruption protocols.

mod corrupt;
mod idx;

pub use corrupt::{
    corruption_sweep, gaussian_mix_corrupt, gaussian_mix_with_noise, salt_pepper_corrupt, write_sweep_csv,
    Corruption, SweepRow,
};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC};

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::posterior::normal;
use crate::scalar::{Element, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    Values(Vec<T>),
}

/// Borrowed view of a subset of targets.
#[derive(Debug, Clone, Copy)]
pub enum TargetRef<'a, T> {
    Classes(&'a [usize]),
    Values(&'a [T]),
}

impl<T: Element> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_ref(&self) -> TargetRef<'_, T> {
        match self {
            Targets::Classes(c) => TargetRef::Classes(c),
            Targets::Values(v) => TargetRef::Values(v),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }
}

/// `N` inputs of a common per-sample shape with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor<T>,
    targets: Targets<T>,
    split: Split,
}

impl<T: Element> Dataset<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets<T>, split: Split) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != targets.len() {
            return Err(Error::Data(format!(
                "inputs {:?} do not match {} targets",
                inputs.shape(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets, split })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets<T> {
        &self.targets
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Inputs of the selected rows as a `[len, ...]` tensor.
    pub fn gather_inputs(&self, idx: &[usize]) -> Tensor<T> {
        let d = self.sample_len();
        let src = self.inputs.values();
        let mut v = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            v.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(&shape, v).expect("gathered rows")
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.gather_inputs(idx),
            targets: self.targets.select(idx),
            split: self.split,
        }
    }

    /// Same targets, new input values of the same shape.
    pub fn with_inputs(&self, values: Vec<T>) -> Result<Self> {
        let inputs = Tensor::new(self.inputs.shape(), values)?;
        Self::new(inputs, self.targets.clone(), self.split)
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.targets.classes().map(|c| c.iter().max().map_or(0, |m| m + 1))
    }
}

/// The cubic toy problem: training points plus an evaluation grid that
/// extends past the training range on both sides.
#[derive(Debug, Clone)]
pub struct CubicRegression<T> {
    pub train: Dataset<T>,
    pub grid: Vec<T>,
    pub x_range: (f64, f64),
}

impl<T: Real> CubicRegression<T> {
    pub fn grid_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.grid.len(), 1], self.grid.clone()).expect("grid")
    }

    /// Whether a grid point lies strictly outside the training range.
    pub fn is_extrapolation(&self, x: T) -> bool {
        let x = x.to_f64_lossy();
        x < self.x_range.0 || x > self.x_range.1
    }
}

/// Points in the evaluation grid.
pub const CUBIC_GRID_POINTS: usize = 201;

/// `y = x³ + ε`, `x ~ U(range)`, `ε ~ N(0, noise_std²)`.
pub fn make_cubic_regression<T: Real, R: Rng + ?Sized>(
    n: usize,
    x_range: (f64, f64),
    noise_std: f64,
    rng: &mut R,
) -> Result<CubicRegression<T>> {
    let (lo, hi) = x_range;
    if n == 0 || !(hi > lo) || !(noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "cubic regression needs n >= 1, lo < hi, noise_std >= 0 (got {n}, {x_range:?}, {noise_std})"
        )));
    }
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(lo..hi);
        let eps = if noise_std > 0.0 { noise_std * normal(rng) } else { 0.0 };
        xs.push(T::lit(x));
        ys.push(T::lit(x * x * x + eps));
    }
    let span = hi - lo;
    let (glo, ghi) = (lo - 0.5 * span, hi + 0.5 * span);
    let grid = (0..CUBIC_GRID_POINTS)
        .map(|i| T::lit(glo + (ghi - glo) * i as f64 / (CUBIC_GRID_POINTS - 1) as f64))
        .collect();
    let train = Dataset::new(Tensor::new(&[n, 1], xs)?, Targets::Values(ys), Split::Train)?;
    Ok(CubicRegression { train, grid, x_range })
}

/// Small Fashion-MNIST-like image task: each class is a fixed smooth
/// pattern; samples are shifted, rescaled and noised copies, clipped to [0, 1].
pub fn make_synthetic_images<T: Real, R: Rng + ?Sized>(
    n: usize,
    classes: usize,
    side: usize,
    pattern_seed: u64,
    split: Split,
    rng: &mut R,
) -> Result<Dataset<T>> {
    if n == 0 || classes < 2 || side < 4 {
        return Err(Error::Config("synthetic images need n >= 1, classes >= 2, side >= 4".into()));
    }
    let prototypes = image_prototypes(classes, side, pattern_seed);
    let mut values = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let dx: i64 = rng.random_range(-1..=1);
        let dy: i64 = rng.random_range(-1..=1);
        let contrast: f64 = rng.random_range(0.6..1.0);
        let proto = &prototypes[c];
        for y in 0..side as i64 {
            for x in 0..side as i64 {
                let (sx, sy) = (x - dx, y - dy);
                let base = if (0..side as i64).contains(&sx) && (0..side as i64).contains(&sy) {
                    proto[(sy as usize) * side + sx as usize]
                } else {
                    0.0
                };
                let v = (contrast * base + 0.15 * normal(rng)).clamp(0.0, 1.0);
                values.push(T::lit(v));
            }
        }
        labels.push(c);
    }
    let inputs = Tensor::new(&[n, 1, side, side], values)?;
    Dataset::new(inputs, Targets::Classes(labels), split)
}

fn image_prototypes(classes: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Data, 0, 0);
    (0..classes)
        .map(|_| {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85) * side as f64,
                        rng.random_range(0.15..0.85) * side as f64,
                        rng.random_range(0.08..0.25) * side as f64,
                        rng.random_range(0.5..1.0),
                    )
                })
                .collect();
            let mut img: Vec<f64> = (0..side * side)
                .map(|p| {
                    let (x, y) = ((p % side) as f64, (p / side) as f64);
                    blobs
                        .iter()
                        .map(|&(cx, cy, r, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                        .sum()
                })
                .collect();
            let max = img.iter().cloned().fold(0.0, f64::max);
            img.iter_mut().for_each(|v| *v /= max);
            img
        })
        .collect()
}

/// Reads a regression CSV with header `x,y`.
pub fn read_regression_csv<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(Error::Data(format!("{}: expected header x,y", path.display())));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let parse = |s: &str| -> Result<T> {
            s.trim()
                .parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        };
        xs.push(parse(&rec[0])?);
        ys.push(parse(&rec[1])?);
    }
    if xs.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let n = xs.len();
    Dataset::new(Tensor::new(&[n, 1], xs)?, Targets::Values(ys), Split::Train)
}

pub fn write_regression_csv<T: Real>(data: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let Targets::Values(ys) = data.targets() else {
        return Err(Error::Data("regression CSV needs real-valued targets".into()));
    };
    if data.sample_len() != 1 {
        return Err(Error::Data("regression CSV needs one input column".into()));
    }
    let mut out = String::from("x,y\n");
    for (x, y) in data.inputs().values().iter().zip(ys) {
        out.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn noiseless_cubic_is_exact() {
        let d = make_cubic_regression::<f64, _>(30, (-1.0, 1.0), 0.0, &mut stream(1, Purpose::Data, 0, 0)).unwrap();
        assert_eq!(d.train.len(), 30);
        let Targets::Values(ys) = d.train.targets() else { panic!() };
        for (x, y) in d.train.inputs().values().iter().zip(ys) {
            assert_eq!(*y, x * x * x);
            assert!((-1.0..1.0).contains(x));
        }
        assert!(d.grid.iter().any(|&g| d.is_extrapolation(g)));
        assert!(d.grid.first().unwrap() < &-1.0 && d.grid.last().unwrap() > &1.0);
    }

    #[test]
    fn cubic_is_reproducible() {
        let a = make_cubic_regression::<f64, _>(30, (-1.0, 1.0), 0.1, &mut stream(5, Purpose::Data, 0, 0)).unwrap();
        let b = make_cubic_regression::<f64, _>(30, (-1.0, 1.0), 0.1, &mut stream(5, Purpose::Data, 0, 0)).unwrap();
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn synthetic_images_are_normalised() {
        let d = make_synthetic_images::<f64, _>(40, 10, 8, 3, Split::Train, &mut stream(2, Purpose::Data, 1, 0)).unwrap();
        assert_eq!(d.inputs().shape(), &[40, 1, 8, 8]);
        assert!(d.inputs().values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.num_classes(), Some(10));
    }

    #[test]
    fn dataset_rejects_count_mismatch() {
        let inputs = Tensor::new(&[3, 1], vec![0.0f64; 3]).unwrap();
        assert!(Dataset::new(inputs, Targets::Classes(vec![0, 1]), Split::Test).is_err());
    }

    #[test]
    fn regression_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_cubic_regression::<f64, _>(7, (-2.0, 2.0), 0.3, &mut stream(9, Purpose::Data, 0, 0)).unwrap();
        let p = dir.path().join("train.csv");
        write_regression_csv(&d.train, &p).unwrap();
        let back: Dataset<f64> = read_regression_csv(&p).unwrap();
        assert_eq!(back, d.train);
    }
}
