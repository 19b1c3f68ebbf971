//! Component-sliced minibatch ELBO training.
//!
//! Each step splits a batch of `B` points into `K` equal slices. Component
//! `k` takes slice `(k + step) mod K` and draws `S` latent samples for it.
//! The loss is the Monte-Carlo mean of per-sample NLLs over every point and
//! sample, plus `β · Σ_l KL_l / N` with `N` the dataset size.

mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TargetRef, Targets};
use crate::error::{Error, Result};
use crate::model::{Model, ModelNodes, ParamGroup};
use crate::posterior::{LatentPrior, STD_FLOOR};
use crate::rng::{stream, Purpose};
use crate::scalar::Real;
use crate::tensor::{Graph, NodeId};

pub use optim::{nesterov_update, SgdParams};

/// Training hyperparameters. Keys follow the usual names from the
/// literature: `lambda0`, `lambda1`, `S`, `K`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate of `U`, `b`.
    pub lambda0: f64,
    /// Constant learning rate of the latent posterior.
    pub lambda1: f64,
    /// Samples per component per step.
    #[serde(rename = "S")]
    pub samples: usize,
    /// Std of the `N(1, σ0²)` posterior-mean initialisation.
    pub sigma0: f64,
    /// Std `s` of the `N(1, s²)` latent prior.
    pub prior_std: f64,
    pub weight_decay: f64,
    #[serde(rename = "K")]
    pub components: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// `A`: epochs over which β ramps from 0 to 1.
    pub beta_anneal_epochs: usize,
    pub lr_anneal_start: usize,
    pub lr_anneal_duration: usize,
    pub lr_final_fraction: f64,
    pub momentum: f64,
    /// Apply Nesterov momentum to the latent posterior as well.
    pub variational_momentum: bool,
    /// Draw `z` per datapoint instead of per slice.
    pub per_datapoint_noise: bool,
    /// Observation noise std for regression.
    pub noise_std: f64,
    /// Lower bound on posterior stds; 0 is allowed for testing.
    pub std_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.05,
            lambda1: 1.2,
            samples: 2,
            sigma0: 0.75,
            prior_std: 0.3,
            weight_decay: 5e-4,
            components: 4,
            batch_size: 128,
            epochs: 300,
            beta_anneal_epochs: 200,
            lr_anneal_start: 150,
            lr_anneal_duration: 120,
            lr_final_fraction: 0.01,
            momentum: 0.9,
            variational_momentum: true,
            per_datapoint_noise: false,
            noise_std: 0.1,
            std_floor: STD_FLOOR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.components == 0 || self.samples == 0 || self.batch_size == 0 {
            return fail("K, S and batch_size must be >= 1".into());
        }
        if !self.batch_size.is_multiple_of(self.components) {
            return fail(format!("K = {} must divide batch_size = {}", self.components, self.batch_size));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return fail(format!("lr_final_fraction must lie in (0, 1], got {}", self.lr_final_fraction));
        }
        if self.beta_anneal_epochs > self.epochs {
            return fail(format!(
                "beta_anneal_epochs = {} exceeds epochs = {}",
                self.beta_anneal_epochs, self.epochs
            ));
        }
        let positive = [("prior_std", self.prior_std), ("noise_std", self.noise_std)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("sigma0", self.sigma0),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("std_floor", self.std_floor),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    fn sgd(&self, group: ParamGroup, epoch: usize) -> SgdParams {
        match group {
            ParamGroup::Weights => SgdParams {
                lr: self.lr_weights(epoch),
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            ParamGroup::WeightPosterior => SgdParams {
                lr: self.lr_weights(epoch),
                momentum: self.momentum,
                weight_decay: 0.0,
            },
            ParamGroup::Variational => SgdParams {
                lr: self.lambda1,
                momentum: if self.variational_momentum { self.momentum } else { 0.0 },
                weight_decay: 0.0,
            },
        }
    }

    pub fn lr_weights(&self, epoch: usize) -> f64 {
        lr_schedule(
            epoch,
            self.lambda0,
            self.lr_anneal_start,
            self.lr_anneal_duration,
            self.lr_final_fraction,
        )
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        beta_schedule(epoch, self.beta_anneal_epochs)
    }
}

/// `min(epoch / A, 1)`; `A = 0` means no warm-up.
pub fn beta_schedule(epoch: usize, anneal_epochs: usize) -> f64 {
    if anneal_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / anneal_epochs as f64).min(1.0)
}

/// `λ0` until `start`, then linear to `final_frac · λ0` over `duration` epochs.
pub fn lr_schedule(epoch: usize, lambda0: f64, start: usize, duration: usize, final_frac: f64) -> f64 {
    if epoch < start {
        return lambda0;
    }
    let t = if duration == 0 {
        1.0
    } else {
        ((epoch - start) as f64 / duration as f64).min(1.0)
    };
    lambda0 * (1.0 - (1.0 - final_frac) * t)
}

/// Splits a batch into `k` consecutive equal slices, in order.
pub fn slice_batch(batch: &[usize], k: usize) -> Result<Vec<&[usize]>> {
    if k == 0 || batch.is_empty() || !batch.len().is_multiple_of(k) {
        return Err(Error::Config(format!(
            "K = {k} must divide the batch length {}",
            batch.len()
        )));
    }
    Ok(batch.chunks(batch.len() / k).collect())
}

/// Slice index assigned to component `k` at global step `step`.
pub fn slice_for_component(k: usize, step: usize, components: usize) -> usize {
    (k + step) % components
}

/// Epoch permutation of `0..n`, a pure function of `(seed, epoch)`.
pub fn shuffled_indices(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Purpose::Shuffle, epoch as u64, 0));
    idx
}

/// Minibatches of one epoch.
///
/// The effective batch is `min(B, N)` rounded down to a multiple of `K`.
/// A trailing short batch is truncated to a multiple of `K` and dropped if
/// that leaves nothing.
pub fn epoch_batches(order: &[usize], batch_size: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let b = batch_size.min(order.len()) / k * k;
    if b == 0 {
        return Err(Error::Config(format!(
            "dataset of {} points cannot fill one batch for K = {k}",
            order.len()
        )));
    }
    Ok(order
        .chunks(b)
        .map(|c| c[..c.len() / k * k].to_vec())
        .filter(|c| !c.is_empty())
        .collect())
}

/// Optimiser state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub step: usize,
    /// One buffer per model parameter tensor, in binding order.
    pub momentum: Vec<Vec<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &Model<T>) -> Self {
        Self {
            epoch: 0,
            step: 0,
            momentum: model.params().iter().map(|(t, _)| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// Per-step objective components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    /// Unscaled `Σ_l KL_l`.
    pub kl: f64,
}

fn targets_ref<'a, T: Real>(t: &'a Targets<T>) -> TargetRef<'a, T> {
    t.as_ref()
}

/// Builds the minibatch ELBO loss on `g`.
fn build_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    data: &Dataset<T>,
    batch: &[usize],
    cfg: &TrainConfig,
    beta: f64,
    step: usize,
) -> Result<(LossNodes, ModelNodes)> {
    let k_total = model.components();
    if k_total != cfg.components {
        return Err(Error::Config(format!(
            "model has K = {k_total}, config has K = {}",
            cfg.components
        )));
    }
    let slices = slice_batch(batch, k_total)?;
    let nodes = model.bind(g);
    let s_total = cfg.samples;
    let mut terms = Vec::new();
    for k in 0..k_total {
        let slice = slices[slice_for_component(k, step, k_total)];
        for s in 0..s_total {
            let draw = (k * s_total + s) as u64;
            let groups: Vec<&[usize]> = if cfg.per_datapoint_noise {
                slice.chunks(1).collect()
            } else {
                vec![slice]
            };
            for (r, rows) in groups.into_iter().enumerate() {
                let mut rng = stream(cfg.seed, Purpose::TrainNoise, step as u64, (draw << 32) | r as u64);
                let x = g.leaf(&data.gather_inputs(rows));
                let out = model.forward_sample(g, &nodes, x, k, &mut rng)?;
                let targets = data.targets().select(rows);
                let nll = model.nll(g, out, targets_ref(&targets))?;
                terms.push(nll);
            }
        }
    }
    // every term is a mean over an equal share of the B·S (point, sample) pairs
    let mut nll = terms[0];
    for &t in &terms[1..] {
        nll = g.add(nll, t)?;
    }
    let nll = g.scale(nll, T::one() / T::from_count(terms.len()));
    let prior = LatentPrior::new(T::lit(cfg.prior_std))?;
    let kl = model.kl_on(g, &nodes, &prior)?;
    let loss = match kl {
        Some(kl) if beta != 0.0 => {
            let w = g.scale(kl, T::lit(beta) / T::from_count(data.len()));
            g.add(nll, w)?
        }
        _ => g.identity(nll),
    };
    Ok(((loss, nll, kl), nodes))
}

type LossNodes = (NodeId, NodeId, Option<NodeId>);

fn stats<T: Real>(g: &Graph<T>, ids: LossNodes) -> Result<StepStats> {
    let (loss, nll, kl) = ids;
    let loss_v = g.item(loss).to_f64_lossy();
    if !loss_v.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss_v}")));
    }
    Ok(StepStats {
        loss: loss_v,
        nll: g.item(nll).to_f64_lossy(),
        kl: kl.map_or(0.0, |k| g.item(k).to_f64_lossy()),
    })
}

/// Evaluates the minibatch objective without touching the model.
pub fn minibatch_objective<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    batch: &[usize],
    cfg: &TrainConfig,
    beta: f64,
    step: usize,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let (ids, _) = build_loss(&mut g, model, data, batch, cfg, beta, step)?;
    stats(&g, ids)
}

/// Loss and gradients for one batch; gradients are added to each parameter's buffer.
pub fn elbo_gradients<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    batch: &[usize],
    cfg: &TrainConfig,
    beta: f64,
    step: usize,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let (ids, nodes) = build_loss(&mut g, model, data, batch, cfg, beta, step)?;
    let out = stats(&g, ids)?;
    g.backward(ids.0)?;
    for (&id, (t, _)) in nodes.ids().iter().zip(model.params_mut()) {
        g.accumulate_into(id, t)?;
    }
    Ok(out)
}

/// One optimisation step on `batch`.
pub fn elbo_step<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    batch: &[usize],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<StepStats> {
    let beta = cfg.beta(state.epoch);
    model.zero_grad();
    let out = elbo_gradients(model, data, batch, cfg, beta, state.step)?;
    for ((t, group), buf) in model.params_mut().into_iter().zip(state.momentum.iter_mut()) {
        if !t.requires_grad() {
            continue;
        }
        let hp = cfg.sgd(group, state.epoch);
        let grad = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]);
        nesterov_update(t.values_mut(), &grad, buf, hp);
    }
    model.zero_grad();
    model.apply_floor();
    if !model.is_finite() {
        return Err(Error::NonFinite(format!("parameters diverged at step {}", state.step)));
    }
    state.step += 1;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub lr_weights: f64,
    pub lr_variational: f64,
}

/// Sets every posterior std floor of `model` to the configured value.
pub fn apply_config_floor<T: Real>(model: &mut Model<T>, cfg: &TrainConfig) {
    for layer in model.layers_mut() {
        if let Some(p) = layer.posterior_mut() {
            p.set_std_floor(T::lit(cfg.std_floor));
        }
    }
    model.apply_floor();
}

/// Runs `cfg.epochs` epochs of shuffled minibatch training.
pub fn train<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, data, cfg, |_, _| {})
}

/// [`train`] with a hook called after each epoch.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model<T>, &EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(Error::dim("training inputs", data.sample_shape(), model.input_shape()));
    }
    apply_config_floor(model, cfg);
    let mut state = TrainState::new(model);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let order = shuffled_indices(cfg.seed, epoch, data.len());
        let batches = epoch_batches(&order, cfg.batch_size, cfg.components)?;
        let (mut loss, mut nll, mut kl) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let s = elbo_step(model, data, batch, cfg, &mut state)?;
            loss += s.loss;
            nll += s.nll;
            kl += s.kl;
        }
        let n = batches.len() as f64;
        let log = EpochLog {
            epoch,
            loss: loss / n,
            nll: nll / n,
            kl: kl / n,
            beta: cfg.beta(epoch),
            lr_weights: cfg.lr_weights(epoch),
            lr_variational: cfg.lambda1,
        };
        on_epoch(model, &log);
        logs.push(log);
    }
    Ok(logs)
}

pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,nll,kl,beta,lr_weights,lr_variational\n");
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.epoch, l.loss, l.nll, l.kl, l.beta, l.lr_weights, l.lr_variational
        )
        .unwrap();
    }
    out
}

pub fn write_log_csv(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, logs_to_csv(logs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        assert_eq!(beta_schedule(0, 200), 0.0);
        assert_eq!(beta_schedule(100, 200), 0.5);
        assert_eq!(beta_schedule(200, 200), 1.0);
        assert_eq!(beta_schedule(250, 200), 1.0);
        assert_eq!(beta_schedule(0, 0), 1.0);
    }

    #[test]
    fn lr_examples() {
        assert_eq!(lr_schedule(0, 0.05, 150, 120, 0.01), 0.05);
        assert_eq!(lr_schedule(149, 0.05, 150, 120, 0.01), 0.05);
        assert!((lr_schedule(210, 0.05, 150, 120, 0.01) - 0.02525).abs() < 1e-15);
        assert!((lr_schedule(300, 0.05, 150, 120, 0.01) - 0.0005).abs() < 1e-15);
        assert!((lr_schedule(270, 0.05, 150, 120, 0.01) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn slicing() {
        let b: Vec<usize> = (0..128).collect();
        let s = slice_batch(&b, 8).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|x| x.len() == 16));
        assert!(slice_batch(&b, 3).is_err());
        let cfg = TrainConfig { batch_size: 128, components: 3, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rotation_covers_slices() {
        for step in 0..5 {
            let mut seen: Vec<usize> = (0..4).map(|k| slice_for_component(k, step, 4)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
        assert_eq!(slice_for_component(0, 1, 4), 1);
    }

    #[test]
    fn batches_respect_k() {
        let order: Vec<usize> = (0..10).collect();
        let b = epoch_batches(&order, 4, 2).unwrap();
        assert_eq!(b, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
        let b = epoch_batches(&order, 4, 4).unwrap();
        assert_eq!(b.len(), 2);
        let b = epoch_batches(&order, 128, 4).unwrap();
        assert_eq!(b, vec![(0..8).collect::<Vec<_>>()]);
    }

    #[test]
    fn toml_keys() {
        let cfg = TrainConfig::from_toml_str("lambda0 = 0.1\nS = 3\nK = 2\nbatch_size = 4\nepochs = 5\nbeta_anneal_epochs = 5\n").unwrap();
        assert_eq!((cfg.lambda0, cfg.samples, cfg.components), (0.1, 3, 2));
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shuffle_is_deterministic() {
        assert_eq!(shuffled_indices(3, 1, 50), shuffled_indices(3, 1, 50));
        assert_ne!(shuffled_indices(3, 1, 50), shuffled_indices(3, 2, 50));
        let mut s = shuffled_indices(3, 1, 50);
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
