//! Ensemble prediction and evaluation metrics.
//!
//! A prediction for one datapoint is the set of `M = K·S` sampled softmax
//! vectors; the combined prediction is their arithmetic mean. Entropies are
//! in nats with `0·ln 0 = 0`. Argmax ties go to the lowest class index.
//!
//! Calibration bins split [0, 1] into `n` equal intervals, right-closed,
//! with the first bin also containing 0: bin `b` holds confidences in
//! `(b/n, (b+1)/n]`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerNoise, Likelihood, Model};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;
use crate::tensor::{Graph, Tensor};

/// Default number of calibration bins.
pub const ECE_BINS: usize = 15;

/// Sampled predictions for one datapoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction<T> {
    /// `M × C`, row-major.
    probs: Vec<T>,
    label: usize,
}

impl<T: Real> PointPrediction<T> {
    pub fn label(&self) -> usize {
        self.label
    }

    pub fn samples(&self, classes: usize) -> impl Iterator<Item = &[T]> {
        self.probs.chunks(classes)
    }

    pub fn sample_count(&self, classes: usize) -> usize {
        self.probs.len() / classes
    }

    pub fn mean(&self, classes: usize) -> Vec<T> {
        let m = T::from_count(self.sample_count(classes));
        let mut acc = vec![T::zero(); classes];
        for s in self.samples(classes) {
            acc.iter_mut().zip(s).for_each(|(a, &p)| *a = *a + p);
        }
        acc.into_iter().map(|a| a / m).collect()
    }
}

/// Predictions for a collection of datapoints over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<T> {
    classes: usize,
    points: Vec<PointPrediction<T>>,
}

fn prob_tolerance<T: Real>(classes: usize) -> T {
    T::lit(1e-9).max(T::epsilon() * T::from_count(8 * classes))
}

impl<T: Real> PredictionSet<T> {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            points: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PointPrediction<T>] {
        &self.points
    }

    /// Adds a datapoint; every row of `probs` must be a probability vector.
    pub fn push(&mut self, probs: Vec<T>, label: usize) -> Result<()> {
        let c = self.classes;
        if c == 0 || probs.is_empty() || !probs.len().is_multiple_of(c) {
            return Err(Error::dim("prediction", &[probs.len()], &[c]));
        }
        if label >= c {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: label,
                len: c,
            });
        }
        let tol = prob_tolerance::<T>(c);
        for row in probs.chunks(c) {
            let sum: T = row.iter().copied().sum();
            if row.iter().any(|&p| !(p >= T::zero())) || (sum - T::one()).abs() > tol {
                return Err(Error::Data(format!("not a probability vector: {row:?}")));
            }
        }
        self.points.push(PointPrediction { probs, label });
        Ok(())
    }

    pub fn mean_vectors(&self) -> Vec<Vec<T>> {
        self.points.iter().map(|p| p.mean(self.classes)).collect()
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn entropy<T: Real>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| T::zero() - x * x.ln())
        .sum()
}

/// Evaluation options for [`predict`].
#[derive(Debug, Clone, Copy)]
pub struct PredictConfig {
    /// Draws per component; each datapoint gets `K × S` predictions.
    pub samples_per_component: usize,
    /// Rows sharing a `z` draw.
    pub batch: usize,
    /// Draw a fresh `z` for every datapoint instead of every batch.
    pub per_datapoint: bool,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            samples_per_component: 5,
            batch: 256,
            per_datapoint: false,
            seed: 0,
        }
    }
}

/// Runs `K × S` stochastic forward passes over `inputs` and calls `sink`
/// with each output block `(first_row, sample_index, values)`.
fn sample_outputs<T: Real>(
    model: &Model<T>,
    inputs: &Tensor<T>,
    cfg: &PredictConfig,
    mut sink: impl FnMut(usize, usize, &[T]) -> Result<()>,
) -> Result<()> {
    if cfg.samples_per_component == 0 {
        return Err(Error::Config("samples_per_component must be >= 1".into()));
    }
    let n = inputs.shape()[0];
    let row_len: usize = inputs.shape()[1..].iter().product();
    let chunk = if cfg.per_datapoint { 1 } else { cfg.batch.max(1) };
    let k_total = model.components();
    for k in 0..k_total {
        for s in 0..cfg.samples_per_component {
            let sample = k * cfg.samples_per_component + s;
            for (c, start) in (0..n).step_by(chunk).enumerate() {
                let end = (start + chunk).min(n);
                let mut shape = inputs.shape().to_vec();
                shape[0] = end - start;
                let x = Tensor::new(&shape, inputs.values()[start * row_len..end * row_len].to_vec())?;
                let mut rng = stream(cfg.seed, Purpose::EvalNoise, sample as u64, c as u64);
                let mut g = Graph::new();
                let nodes = model.bind(&mut g);
                let xi = g.leaf(&x);
                let out = model.forward_sample(&mut g, &nodes, xi, k, &mut rng)?;
                let out = match model.likelihood() {
                    Likelihood::Classification => g.log_softmax(out)?,
                    Likelihood::Regression { .. } => out,
                };
                sink(start, sample, g.value(out))?;
            }
        }
    }
    Ok(())
}

/// Sampled softmax predictions for every datapoint of a classification set.
pub fn predict<T: Real>(model: &Model<T>, data: &Dataset<T>, cfg: &PredictConfig) -> Result<PredictionSet<T>> {
    let labels = data
        .targets()
        .classes()
        .ok_or_else(|| Error::Data("predict needs class labels".into()))?;
    let classes = model.output_shape()?[0];
    let m = model.components() * cfg.samples_per_component;
    let n = data.len();
    let mut probs = vec![T::zero(); n * m * classes];
    sample_outputs(model, data.inputs(), cfg, |start, sample, logp| {
        for (r, row) in logp.chunks(classes).enumerate() {
            let at = ((start + r) * m + sample) * classes;
            for (dst, &lp) in probs[at..at + classes].iter_mut().zip(row) {
                *dst = lp.exp();
            }
        }
        Ok(())
    })?;
    let mut set = PredictionSet::new(classes);
    for (i, &label) in labels.iter().enumerate() {
        set.push(probs[i * m * classes..(i + 1) * m * classes].to_vec(), label)?;
    }
    Ok(set)
}

/// Softmax of the deterministic network (`z ≡ 1`, baseline weight means).
pub fn predict_deterministic<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<PredictionSet<T>> {
    let labels = data
        .targets()
        .classes()
        .ok_or_else(|| Error::Data("predict needs class labels".into()))?;
    let classes = model.output_shape()?[0];
    let mut g = Graph::new();
    let nodes = model.bind(&mut g);
    let x = g.leaf(data.inputs());
    let noise = vec![LayerNoise::Unit; model.layers().len()];
    let out = model.forward_with_noise(&mut g, &nodes, x, noise)?;
    let lp = g.log_softmax(out)?;
    let mut set = PredictionSet::new(classes);
    for (row, &label) in g.value(lp).chunks(classes).zip(labels) {
        set.push(row.iter().map(|v| v.exp()).collect(), label)?;
    }
    Ok(set)
}

/// Predictive mean and sample std of the regression function at each input row.
pub fn predict_regression<T: Real>(model: &Model<T>, inputs: &Tensor<T>, cfg: &PredictConfig) -> Result<Vec<(T, T)>> {
    let n = inputs.shape()[0];
    let m = model.components() * cfg.samples_per_component;
    let mut draws = vec![T::zero(); n * m];
    sample_outputs(model, inputs, cfg, |start, sample, out| {
        for (r, &y) in out.iter().enumerate() {
            draws[(start + r) * m + sample] = y;
        }
        Ok(())
    })?;
    let mm = T::from_count(m);
    Ok(draws
        .chunks(m)
        .map(|d| {
            let mean = d.iter().copied().sum::<T>() / mm;
            let var = d.iter().map(|&y| (y - mean) * (y - mean)).sum::<T>() / mm;
            (mean, var.sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationScores {
    /// Fraction misclassified, in [0, 1].
    pub error: f64,
    /// Mean `−ln p̄(label)`.
    pub nll: f64,
}

pub fn error_and_nll<T: Real>(set: &PredictionSet<T>) -> Result<ClassificationScores> {
    if set.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    let c = set.classes();
    let (mut wrong, mut nll) = (0usize, T::zero());
    for p in set.points() {
        let mean = p.mean(c);
        if argmax(&mean) != p.label() {
            wrong += 1;
        }
        nll = nll - mean[p.label()].ln();
    }
    let n = set.len() as f64;
    Ok(ClassificationScores {
        error: wrong as f64 / n,
        nll: nll.to_f64_lossy() / n,
    })
}

/// Calibration bin index for a confidence in [0, 1].
pub fn bin_index<T: Real>(conf: T, n_bins: usize) -> usize {
    let n = T::from_count(n_bins);
    let upper = |b: usize| T::from_count(b + 1) / n;
    let lower = |b: usize| T::from_count(b) / n;
    let guess = (conf * n).ceil().to_usize().unwrap_or(0).saturating_sub(1).min(n_bins - 1);
    let mut b = guess;
    while b > 0 && conf <= lower(b) {
        b -= 1;
    }
    while b + 1 < n_bins && conf > upper(b) {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction correct in the bin (0 when empty).
    pub accuracy: f64,
    pub count: usize,
}

pub fn reliability_diagram<T: Real>(set: &PredictionSet<T>, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be >= 1".into()));
    }
    let c = set.classes();
    let mut conf_sum = vec![T::zero(); n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for p in set.points() {
        let mean = p.mean(c);
        let pred = argmax(&mean);
        let conf = mean[pred];
        let b = bin_index(conf, n_bins);
        conf_sum[b] = conf_sum[b] + conf;
        count[b] += 1;
        if pred == p.label() {
            correct[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b];
            let (confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b].to_f64_lossy() / n as f64, correct[b] as f64 / n as f64)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                confidence,
                accuracy,
                count: n,
            }
        })
        .collect())
}

/// Expected calibration error: `Σ_b (|b|/N)·|acc(b) − conf(b)|`.
pub fn ece<T: Real>(set: &PredictionSet<T>, n_bins: usize) -> Result<f64> {
    let bins = reliability_diagram(set, n_bins)?;
    Ok(ece_from_bins(&bins, set.len()))
}

pub fn ece_from_bins(bins: &[ReliabilityBin], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / total as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

pub fn write_reliability_csv(bins: &[ReliabilityBin], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("bin,lower,upper,confidence,accuracy,count\n");
    for (i, b) in bins.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{},{}", b.lower, b.upper, b.confidence, b.accuracy, b.count).unwrap();
    }
    write_file(path.as_ref(), out)
}

/// Total, aleatoric and epistemic entropy per datapoint, with dataset means.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport<T> {
    pub total: Vec<T>,
    pub aleatoric: Vec<T>,
    pub epistemic: Vec<T>,
    pub mean_total: T,
    pub mean_aleatoric: T,
    pub mean_epistemic: T,
}

pub fn uncertainty_decomposition<T: Real>(set: &PredictionSet<T>) -> Result<UncertaintyReport<T>> {
    if set.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    let c = set.classes();
    let (mut total, mut aleatoric, mut epistemic) = (Vec::new(), Vec::new(), Vec::new());
    for p in set.points() {
        let h = entropy(&p.mean(c));
        let m = T::from_count(p.sample_count(c));
        let a = p.samples(c).map(entropy).sum::<T>() / m;
        // the reported total is the sum of its parts, so the split is exact
        let e = h - a;
        total.push(a + e);
        aleatoric.push(a);
        epistemic.push(e);
    }
    let n = T::from_count(set.len());
    let mean = |v: &[T]| v.iter().copied().sum::<T>() / n;
    Ok(UncertaintyReport {
        mean_total: mean(&total),
        mean_aleatoric: mean(&aleatoric),
        mean_epistemic: mean(&epistemic),
        total,
        aleatoric,
        epistemic,
    })
}

/// Writes `point_id,sample_id,label,p_0..p_{C-1}`.
pub fn write_prediction_dump<T: Real>(set: &PredictionSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let c = set.classes();
    let mut out = String::from("point_id,sample_id,label");
    for j in 0..c {
        write!(out, ",p_{j}").unwrap();
    }
    out.push('\n');
    for (i, p) in set.points().iter().enumerate() {
        for (s, row) in p.samples(c).enumerate() {
            write!(out, "{i},{s},{}", p.label()).unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    write_file(path.as_ref(), out)
}

pub fn read_prediction_dump<T: Real>(path: impl AsRef<Path>) -> Result<PredictionSet<T>> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.len() < 4 || &headers[0] != "point_id" || &headers[1] != "sample_id" || &headers[2] != "label" {
        return Err(bad("expected header point_id,sample_id,label,p_0,...".into()));
    }
    let classes = headers.len() - 3;
    let mut set = PredictionSet::new(classes);
    let mut current: Option<(usize, usize, Vec<T>)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
        let (point, label) = (int(&rec[0])?, int(&rec[2])?);
        let row = (3..rec.len())
            .map(|j| rec[j].parse::<f64>().map(T::lit).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<T>>>()?;
        match &mut current {
            Some((p, _, probs)) if *p == point => probs.extend(row),
            _ => {
                if let Some((_, l, probs)) = current.take() {
                    set.push(probs, l)?;
                }
                if point != set.len() {
                    return Err(bad(format!("point ids must be consecutive, found {point}")));
                }
                current = Some((point, label, row));
            }
        }
    }
    if let Some((_, l, probs)) = current {
        set.push(probs, l)?;
    }
    Ok(set)
}

/// Per-point entropies with mean softmax, sorted by ascending total entropy.
pub fn write_entropy_ranking<T: Real>(
    set: &PredictionSet<T>,
    report: &UncertaintyReport<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let c = set.classes();
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| report.total[a].partial_cmp(&report.total[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = String::from("rank,point_id,label,total,aleatoric,epistemic");
    for j in 0..c {
        write!(out, ",mean_p_{j}").unwrap();
    }
    out.push('\n');
    for (rank, &i) in order.iter().enumerate() {
        let p = &set.points()[i];
        write!(
            out,
            "{rank},{i},{},{},{},{}",
            p.label(),
            report.total[i],
            report.aleatoric[i],
            report.epistemic[i]
        )
        .unwrap();
        for v in p.mean(c) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path.as_ref(), out)
}

pub(crate) fn write_file(path: &Path, contents: String) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(classes: usize, points: &[(&[f64], usize)]) -> PredictionSet<f64> {
        let mut s = PredictionSet::new(classes);
        for (p, l) in points {
            s.push(p.to_vec(), *l).unwrap();
        }
        s
    }

    #[test]
    fn rejects_invalid_probabilities() {
        let mut s = PredictionSet::<f64>::new(2);
        assert!(s.push(vec![0.6, 0.6], 0).is_err());
        assert!(s.push(vec![1.2, -0.2], 0).is_err());
        assert!(s.push(vec![0.5, 0.5], 2).is_err());
        assert!(s.push(vec![0.5, 0.5, 1.0], 0).is_err());
    }

    #[test]
    fn tie_counts_as_lowest_index() {
        let s = set(2, &[(&[0.5, 0.5], 0)]);
        let r = error_and_nll(&s).unwrap();
        assert_eq!(r.error, 0.0);
        assert!((r.nll - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_one_hot() {
        let s = set(3, &[(&[1.0, 0.0, 0.0], 0), (&[0.0, 0.0, 1.0], 2)]);
        let r = error_and_nll(&s).unwrap();
        assert_eq!((r.error, r.nll), (0.0, 0.0));
    }

    #[test]
    fn three_hand_predictions() {
        // means: (0.7,0.3) label 0; (0.2,0.8) label 0; (0.4,0.6) label 1
        let s = set(2, &[(&[0.7, 0.3], 0), (&[0.2, 0.8], 0), (&[0.5, 0.5, 0.3, 0.7], 1)]);
        let r = error_and_nll(&s).unwrap();
        assert!((r.error - 1.0 / 3.0).abs() < 1e-15);
        let expected = -(0.7f64.ln() + 0.2f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((r.nll - expected).abs() < 1e-12);
        assert!(error_and_nll(&PredictionSet::<f64>::new(2)).is_err());
    }

    #[test]
    fn ece_two_point_case() {
        let s = set(2, &[(&[0.9, 0.1], 0), (&[0.9, 0.1], 1)]);
        assert!((ece(&s, ECE_BINS).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ece_zero_when_calibrated() {
        // two points at confidence 0.5, one right, one wrong
        let s = set(2, &[(&[0.5, 0.5], 0), (&[0.5, 0.5], 1)]);
        assert_eq!(ece(&s, ECE_BINS).unwrap(), 0.0);
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.6f64, 15), 8);
        assert_eq!(bin_index(0.0f64, 15), 0);
        assert_eq!(bin_index(1.0f64, 15), 14);
        assert_eq!(bin_index(1.0f64 / 15.0, 15), 0);
        assert_eq!(bin_index(1.0f64 / 15.0 + 1e-12, 15), 1);
        assert_eq!(bin_index(0.5f64, 1), 0);
    }

    #[test]
    fn reliability_consistent_with_ece() {
        let s = set(2, &[(&[0.9, 0.1], 0), (&[0.3, 0.7], 0), (&[0.55, 0.45], 1), (&[0.8, 0.2], 0)]);
        let bins = reliability_diagram(&s, ECE_BINS).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(ece_from_bins(&bins, 4), ece(&s, ECE_BINS).unwrap());
        let one = set(2, &[(&[1.0, 0.0], 0)]);
        let b = reliability_diagram(&one, ECE_BINS).unwrap();
        assert_eq!((b[14].confidence, b[14].accuracy, b[14].count), (1.0, 1.0, 1));
    }

    #[test]
    fn decomposition_cases() {
        let s = set(2, &[(&[0.3, 0.7, 0.3, 0.7], 0)]);
        let r = uncertainty_decomposition(&s).unwrap();
        assert!(r.epistemic[0].abs() < 1e-15);

        let s = set(2, &[(&[1.0, 0.0, 0.0, 1.0], 0)]);
        let r = uncertainty_decomposition(&s).unwrap();
        assert_eq!(r.total[0], 2f64.ln());
        assert_eq!(r.aleatoric[0], 0.0);
        assert_eq!(r.epistemic[0], 2f64.ln());
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let third = 1.0 / 3.0;
        let s = set(3, &[(&[third, third, 1.0 - 2.0 * third, 0.1, 0.2, 0.7], 2), (&[0.25, 0.5, 0.25, 0.0, 1.0, 0.0], 1)]);
        let p = dir.path().join("dump.csv");
        write_prediction_dump(&s, &p).unwrap();
        let back = read_prediction_dump::<f64>(&p).unwrap();
        assert_eq!(back, s);
    }
}
