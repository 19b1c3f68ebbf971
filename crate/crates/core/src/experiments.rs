//! Scaled-down experiment drivers: depth and width sweeps, weight export.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{make_cubic_regression, make_synthetic_images, CubicRegression, Dataset, Split, Targets};
use crate::error::{Error, Result};
use crate::metrics::{error_and_nll, predict, predict_regression, PredictConfig};
use crate::model::{Activation, Architecture, LayerSpec, Likelihood, Method, Model};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;
use crate::train::{train, EpochLog, TrainConfig};

/// `depth` ReLU layers of `width` units and a linear scalar output.
pub fn regression_arch(method: Method, depth: usize, width: usize) -> Architecture {
    let mut layers = vec![
        LayerSpec::Dense {
            out: width,
            activation: Activation::Relu,
        };
        depth
    ];
    layers.push(LayerSpec::Dense {
        out: 1,
        activation: Activation::Identity,
    });
    Architecture::new(method, layers)
}

/// Flatten followed by ReLU hidden layers and a linear logit layer.
pub fn classifier_arch(method: Method, hidden: &[usize], classes: usize) -> Architecture {
    let mut arch = Architecture::mlp(method, hidden, classes);
    arch.layers.insert(0, LayerSpec::Flatten);
    arch
}

/// Weights plus biases of a dense network `input → hidden… → out`.
pub fn mlp_param_count(input: usize, hidden: &[usize], out: usize) -> usize {
    let mut prev = input;
    let mut n = 0;
    for &h in hidden.iter().chain(std::iter::once(&out)) {
        n += prev * h + h;
        prev = h;
    }
    n
}

/// Hidden width whose parameter count is nearest to `factor ×` that of the base width.
pub fn width_for_factor(input: usize, base: usize, depth: usize, out: usize, factor: f64) -> usize {
    let count = |h: usize| mlp_param_count(input, &vec![h; depth], out) as f64;
    let target = factor * count(base);
    let mut h = 1;
    while count(h + 1) <= target {
        h += 1;
    }
    if (count(h + 1) - target).abs() < (target - count(h)).abs() {
        h + 1
    } else {
        h
    }
}

fn method_code(m: Method) -> u64 {
    match m {
        Method::Ibnn => 0,
        Method::BnnVi => 1,
    }
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Ibnn => "ibnn",
        Method::BnnVi => "bnn-vi",
    }
}

/// Builds a fresh model for `arch` and trains it on `data`.
pub fn fit<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    likelihood: Likelihood,
    cfg: &TrainConfig,
    init_key: u64,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    let mut rng = stream(cfg.seed, Purpose::Init, init_key, method_code(arch.method));
    let k = match arch.method {
        Method::Ibnn => cfg.components,
        Method::BnnVi => 1,
    };
    let mut model = Model::build(arch, data.sample_shape(), likelihood, k, cfg.sigma0, &mut rng)?;
    let mut cfg = cfg.clone();
    cfg.components = k;
    let logs = train(&mut model, data, &cfg)?;
    Ok((model, logs))
}

/// Same step budget for the baseline: one component, `K·S` weight samples per step.
pub fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        components: 1,
        samples: cfg.components * cfg.samples,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone)]
pub struct DepthSweep {
    pub depths: Vec<usize>,
    pub width: usize,
    pub n_points: usize,
    pub x_range: (f64, f64),
    /// Std of the noise added to `x³` when generating targets.
    pub data_noise: f64,
    pub ibnn: TrainConfig,
    pub bnn: TrainConfig,
    pub bnn_prior_std: f64,
    pub bnn_init_std: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl DepthSweep {
    pub fn preset(seed: u64) -> Self {
        let ibnn = regress1d_config(seed);
        Self {
            depths: (1..=5).collect(),
            width: 256,
            n_points: 30,
            x_range: (-1.0, 1.0),
            data_noise: 0.0,
            bnn: baseline_config(&ibnn),
            ibnn,
            bnn_prior_std: 1.0,
            bnn_init_std: 0.05,
            eval_samples: 32,
            seed,
        }
    }

    pub fn dataset<T: Real>(&self) -> Result<CubicRegression<T>> {
        let mut rng = stream(self.seed, Purpose::Data, 0, 0);
        make_cubic_regression(self.n_points, self.x_range, self.data_noise, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub extrapolation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthResult {
    pub method: &'static str,
    pub depth: usize,
    pub train_rmse: f64,
    /// Mean predictive std over grid points inside the training range.
    pub in_range_std: f64,
    /// Mean predictive std over grid points outside it.
    pub extrapolation_std: f64,
    pub grid: Vec<GridPoint>,
}

/// Root-mean-square error of the predictive mean on `data`.
pub fn regression_rmse<T: Real>(model: &Model<T>, data: &Dataset<T>, cfg: &PredictConfig) -> Result<f64> {
    let Targets::Values(y) = data.targets() else {
        return Err(Error::Data("regression RMSE needs real targets".into()));
    };
    let pred = predict_regression(model, data.inputs(), cfg)?;
    let se: f64 = pred
        .iter()
        .zip(y)
        .map(|(&(m, _), &t)| (m - t).to_f64_lossy().powi(2))
        .sum();
    Ok((se / y.len() as f64).sqrt())
}

pub fn depth_result<T: Real>(
    model: &Model<T>,
    data: &CubicRegression<T>,
    method: Method,
    depth: usize,
    cfg: &PredictConfig,
) -> Result<DepthResult> {
    let train_rmse = regression_rmse(model, &data.train, cfg)?;
    let grid_x = data.grid_tensor();
    let pred = predict_regression(model, &grid_x, cfg)?;
    let grid: Vec<GridPoint> = data
        .grid
        .iter()
        .zip(&pred)
        .map(|(&x, &(m, s))| GridPoint {
            x: x.to_f64_lossy(),
            mean: m.to_f64_lossy(),
            std: s.to_f64_lossy(),
            extrapolation: data.is_extrapolation(x),
        })
        .collect();
    let avg = |extra: bool| {
        let v: Vec<f64> = grid.iter().filter(|p| p.extrapolation == extra).map(|p| p.std).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(DepthResult {
        method: method_name(method),
        depth,
        train_rmse,
        in_range_std: avg(false),
        extrapolation_std: avg(true),
        grid,
    })
}

/// Trains both methods at every depth on the cubic dataset.
pub fn run_depth_sweep(sweep: &DepthSweep) -> Result<Vec<DepthResult>> {
    let data = sweep.dataset::<f64>()?;
    let eval = PredictConfig {
        samples_per_component: sweep.eval_samples,
        seed: sweep.seed,
        ..PredictConfig::default()
    };
    let mut out = Vec::new();
    for &depth in &sweep.depths {
        for (method, cfg) in [(Method::Ibnn, &sweep.ibnn), (Method::BnnVi, &sweep.bnn)] {
            let mut arch = regression_arch(method, depth, sweep.width);
            arch.bnn_prior_std = sweep.bnn_prior_std;
            arch.bnn_init_std = sweep.bnn_init_std;
            let lik = Likelihood::Regression { noise_std: cfg.noise_std };
            let (model, _) = fit(&arch, &data.train, lik, cfg, depth as u64)?;
            out.push(depth_result(&model, &data, method, depth, &eval)?);
        }
    }
    Ok(out)
}

pub fn write_depth_csv(results: &[DepthResult], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("method,depth,x,mean,std,extrapolation\n");
    for r in results {
        for p in &r.grid {
            writeln!(out, "{},{},{},{},{},{}", r.method, r.depth, p.x, p.mean, p.std, p.extrapolation as u8).unwrap();
        }
    }
    write(path.as_ref(), out)
}

pub fn write_depth_summary_csv(results: &[DepthResult], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("method,depth,train_rmse,in_range_std,extrapolation_std\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.depth, r.train_rmse, r.in_range_std, r.extrapolation_std
        )
        .unwrap();
    }
    write(path.as_ref(), out)
}

#[derive(Debug, Clone)]
pub struct WidthSweep {
    pub factors: Vec<f64>,
    pub base_hidden: usize,
    pub depth: usize,
    pub seeds: Vec<u64>,
    pub ibnn: TrainConfig,
    pub bnn: TrainConfig,
    pub bnn_prior_std: f64,
    pub bnn_init_std: f64,
    pub eval_samples: usize,
}

impl WidthSweep {
    /// Factors 1, 4, 16 and 64 over one hidden layer of base width 8.
    pub fn preset(seeds: Vec<u64>) -> Self {
        // long enough for the baseline's weight KL to act on its stds
        let ibnn = TrainConfig {
            epochs: 300,
            beta_anneal_epochs: 200,
            lr_anneal_start: 150,
            lr_anneal_duration: 120,
            ..images_config(0)
        };
        Self {
            factors: vec![1.0, 4.0, 16.0, 64.0],
            base_hidden: 8,
            depth: 1,
            seeds,
            bnn: baseline_config(&ibnn),
            ibnn,
            bnn_prior_std: 1.0,
            bnn_init_std: 0.1,
            eval_samples: 4,
        }
    }
}

/// Ten-class 8×8 synthetic train and test sets sharing class prototypes.
pub fn synthetic_split(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let train = make_synthetic_images(n_train, 10, 8, seed, Split::Train, &mut stream(seed, Purpose::Data, 1, 0))?;
    let test = make_synthetic_images(n_test, 10, 8, seed, Split::Test, &mut stream(seed, Purpose::Data, 2, 0))?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WidthRow {
    pub factor: f64,
    pub hidden: usize,
    pub param_count: usize,
    pub method: &'static str,
    pub seed: u64,
    pub error: f64,
    pub nll: f64,
}

/// Trains both methods at every width factor and seed and scores them on `test`.
pub fn run_width_sweep(sweep: &WidthSweep, train_set: &Dataset<f64>, test: &Dataset<f64>) -> Result<Vec<WidthRow>> {
    let classes = train_set
        .num_classes()
        .ok_or_else(|| Error::Data("width sweep needs class labels".into()))?;
    let input = train_set.sample_len();
    let mut rows = Vec::new();
    for &factor in &sweep.factors {
        let hidden = width_for_factor(input, sweep.base_hidden, sweep.depth, classes, factor);
        let widths = vec![hidden; sweep.depth];
        let param_count = mlp_param_count(input, &widths, classes);
        for &seed in &sweep.seeds {
            for (method, base) in [(Method::Ibnn, &sweep.ibnn), (Method::BnnVi, &sweep.bnn)] {
                let cfg = TrainConfig { seed, ..base.clone() };
                let mut arch = classifier_arch(method, &widths, classes);
                arch.bnn_prior_std = sweep.bnn_prior_std;
                arch.bnn_init_std = sweep.bnn_init_std;
                let (model, _) = fit(&arch, train_set, Likelihood::Classification, &cfg, hidden as u64)?;
                debug_assert_eq!(model.network_params(), param_count);
                let eval = PredictConfig {
                    samples_per_component: sweep.eval_samples,
                    seed,
                    ..PredictConfig::default()
                };
                let scores = error_and_nll(&predict(&model, test, &eval)?)?;
                rows.push(WidthRow {
                    factor,
                    hidden,
                    param_count,
                    method: method_name(method),
                    seed,
                    error: scores.error,
                    nll: scores.nll,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_width_csv(rows: &[WidthRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("factor,hidden,param_count,method,seed,error,nll\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.factor, r.hidden, r.param_count, r.method, r.seed, r.error, r.nll
        )
        .unwrap();
    }
    write(path.as_ref(), out)
}

/// One row per mixture component plus a final row for the deterministic `U`.
pub fn export_weights_csv<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::new();
    for k in 0..model.components() {
        rows.push((format!("component_{k}"), model.export_component_weights(k)?));
    }
    rows.push(("deterministic".to_string(), model.export_deterministic_weights()?));
    let mut out = String::from("row");
    for i in 0..rows[0].1.len() {
        write!(out, ",w_{i}").unwrap();
    }
    out.push('\n');
    for (name, vals) in rows {
        out.push_str(&name);
        for v in vals {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write(path.as_ref(), out)
}

/// Settings for the cubic-regression runs.
pub fn regress1d_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda0: 0.003,
        lambda1: 0.05,
        samples: 2,
        sigma0: 0.3,
        prior_std: 1.0,
        weight_decay: 0.0,
        components: 2,
        batch_size: 10,
        epochs: 1000,
        beta_anneal_epochs: 500,
        lr_anneal_start: 500,
        lr_anneal_duration: 400,
        // momentum on the variational group drives single-input stds through the floor
        variational_momentum: false,
        noise_std: 0.3,
        seed,
        ..TrainConfig::default()
    }
}

/// Settings for the small synthetic image classification runs.
pub fn images_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda0: 0.05,
        lambda1: 0.3,
        samples: 2,
        sigma0: 0.5,
        prior_std: 0.3,
        weight_decay: 5e-4,
        components: 4,
        batch_size: 64,
        epochs: 30,
        beta_anneal_epochs: 20,
        lr_anneal_start: 15,
        lr_anneal_duration: 12,
        variational_momentum: false,
        seed,
        ..TrainConfig::default()
    }
}

fn write(path: &Path, contents: String) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counting() {
        assert_eq!(mlp_param_count(4, &[3], 2), 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(width_for_factor(64, 8, 1, 10, 1.0), 8);
        let base = mlp_param_count(64, &[8], 10) as f64;
        for f in [4.0, 16.0, 64.0] {
            let h = width_for_factor(64, 8, 1, 10, f);
            let got = mlp_param_count(64, &[h], 10) as f64;
            let step = mlp_param_count(64, &[h + 1], 10) as f64 - got;
            assert!((got - f * base).abs() <= step / 2.0);
        }
    }

    #[test]
    fn arch_shapes() {
        let a = regression_arch(Method::Ibnn, 3, 16);
        assert_eq!(a.layers.len(), 4);
        let c = classifier_arch(Method::BnnVi, &[8], 10);
        assert_eq!(c.layers[0], LayerSpec::Flatten);
    }
}
