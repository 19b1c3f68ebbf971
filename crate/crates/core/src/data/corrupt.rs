//! Input corruptions and intensity sweeps.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{predict, uncertainty_decomposition, PredictConfig};
use crate::model::Model;
use crate::posterior::normal;
use crate::rng::{stream, Purpose};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// `(1 − γ)·x + γ·ε` with standard-normal `ε`.
    GaussianMix,
    /// Each element independently replaced by 0 or 1 with probability `p`.
    SaltPepper,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianMix => "gaussian-mix",
            Corruption::SaltPepper => "salt-pepper",
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Mixes `x` with given noise; no clamping afterwards.
pub fn gaussian_mix_with_noise<T: Real>(x: &[T], gamma: f64, eps: &[T]) -> Result<Vec<T>> {
    check_unit("gamma", gamma)?;
    if x.len() != eps.len() {
        return Err(Error::dim("gaussian mix", &[x.len()], &[eps.len()]));
    }
    let g = T::lit(gamma);
    let keep = T::one() - g;
    Ok(x.iter().zip(eps).map(|(&v, &e)| keep * v + g * e).collect())
}

pub fn gaussian_mix_corrupt<T: Real, R: Rng + ?Sized>(x: &[T], gamma: f64, rng: &mut R) -> Result<Vec<T>> {
    let eps: Vec<T> = (0..x.len()).map(|_| T::lit(normal(rng))).collect();
    gaussian_mix_with_noise(x, gamma, &eps)
}

pub fn salt_pepper_corrupt<T: Real, R: Rng + ?Sized>(x: &[T], p: f64, rng: &mut R) -> Result<Vec<T>> {
    check_unit("p", p)?;
    Ok(x.iter()
        .map(|&v| {
            if rng.random::<f64>() < p {
                if rng.random::<bool>() {
                    T::one()
                } else {
                    T::zero()
                }
            } else {
                v
            }
        })
        .collect())
}

pub fn corrupt<T: Real, R: Rng + ?Sized>(kind: Corruption, x: &[T], intensity: f64, rng: &mut R) -> Result<Vec<T>> {
    match kind {
        Corruption::GaussianMix => gaussian_mix_corrupt(x, intensity, rng),
        Corruption::SaltPepper => salt_pepper_corrupt(x, intensity, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub intensity: f64,
    /// Mean predictive (total) entropy.
    pub mpe: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Corrupts `data` at each intensity and reports mean entropies.
///
/// Intensities must be ascending. Corruption noise at index `i` comes from
/// its own stream, so rows are reproducible independently of each other.
pub fn corruption_sweep<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    kind: Corruption,
    intensities: &[f64],
    cfg: &PredictConfig,
) -> Result<Vec<SweepRow>> {
    if intensities.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("corruption intensities must be ascending".into()));
    }
    intensities
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let mut rng = stream(cfg.seed, Purpose::Corruption, kind as u64, i as u64);
            let noisy = data.with_inputs(corrupt(kind, data.inputs().values(), level, &mut rng)?)?;
            let set = predict(model, &noisy, cfg)?;
            let r = uncertainty_decomposition(&set)?;
            Ok(SweepRow {
                intensity: level,
                mpe: r.mean_total.to_f64_lossy(),
                aleatoric: r.mean_aleatoric.to_f64_lossy(),
                epistemic: r.mean_epistemic.to_f64_lossy(),
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("intensity,mpe,aleatoric,epistemic\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.intensity, r.mpe, r.aleatoric, r.epistemic).unwrap();
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gaussian_mix_hand_value() {
        let out = gaussian_mix_with_noise(&[0.5f64], 0.2, &[1.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn gaussian_mix_endpoints() {
        let x = [0.1f64, 0.9, 0.4];
        let eps = [2.0, -3.0, 0.5];
        assert_eq!(gaussian_mix_with_noise(&x, 0.0, &eps).unwrap(), x.to_vec());
        assert_eq!(gaussian_mix_with_noise(&x, 1.0, &eps).unwrap(), eps.to_vec());
        assert!(gaussian_mix_with_noise(&x, 1.5, &eps).is_err());
        assert!(gaussian_mix_with_noise(&x, -0.1, &eps).is_err());
    }

    #[test]
    fn not_clamped() {
        let out = gaussian_mix_with_noise(&[1.0f64], 0.5, &[3.0]).unwrap();
        assert_eq!(out[0], 2.0);
    }

    #[test]
    fn salt_pepper_endpoints() {
        let x = vec![0.3f64; 1000];
        let mut rng = stream(1, Purpose::Corruption, 0, 0);
        assert_eq!(salt_pepper_corrupt(&x, 0.0, &mut rng).unwrap(), x);
        let all = salt_pepper_corrupt(&x, 1.0, &mut rng).unwrap();
        assert!(all.iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = all.iter().filter(|&&v| v == 1.0).count();
        assert!((400..600).contains(&ones));
        assert!(salt_pepper_corrupt(&x, 2.0, &mut rng).is_err());
    }
}
