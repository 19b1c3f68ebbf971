//! Central finite differences against the graph's reverse-mode gradients.

#![allow(clippy::needless_range_loop)]

use ibnn::data::{Dataset, Split, Targets};
use ibnn::model::{Activation, Architecture, LayerSpec, Likelihood, Method, Model};
use ibnn::rng::{stream, Purpose};
use ibnn::tensor::{Graph, Tensor};
use ibnn::train::{elbo_gradients, minibatch_objective, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn toy_data(n: usize, dim: usize, lik: Likelihood, seed: u64) -> Dataset<f64> {
    let mut rng = stream(seed, Purpose::Data, 7, 0);
    let x: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets = match lik {
        Likelihood::Classification => Targets::Classes((0..n).map(|i| i % 3).collect()),
        Likelihood::Regression { .. } => Targets::Values((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
    };
    Dataset::new(Tensor::new(&[n, dim], x).unwrap(), targets, Split::Train).unwrap()
}

fn toy_model(dim: usize, lik: Likelihood, method: Method, k: usize, seed: u64) -> Model<f64> {
    let out = match lik {
        Likelihood::Classification => 3,
        Likelihood::Regression { .. } => 1,
    };
    let arch = Architecture::new(
        method,
        vec![
            LayerSpec::Dense { out: 5, activation: Activation::Relu },
            LayerSpec::Dense { out, activation: Activation::Identity },
        ],
    );
    let mut rng = stream(seed, Purpose::Init, 0, 0);
    let mut m = Model::build(&arch, &[dim], lik, k, 0.5, &mut rng).unwrap();
    // spread the stds so the KL and noise paths are well exercised
    for layer in m.layers_mut() {
        if let Some(p) = layer.posterior_mut() {
            for s in p.stds_mut().values_mut() {
                *s = 0.05 + 0.3 * rng.random::<f64>();
            }
        }
    }
    m
}

fn check(model: &mut Model<f64>, data: &Dataset<f64>, cfg: &TrainConfig, beta: f64) -> f64 {
    let batch: Vec<usize> = (0..data.len()).collect();
    model.zero_grad();
    elbo_gradients(model, data, &batch, cfg, beta, 3).unwrap();
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(t, _)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    let n_params = analytic.len();
    for p in 0..n_params {
        for i in 0..analytic[p].len() {
            let eval = |delta: f64| {
                let mut probe = model.clone();
                probe.params_mut()[p].0.values_mut()[i] += delta;
                minibatch_objective(&probe, data, &batch, cfg, beta, 3).unwrap().loss
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[p][i], fd));
        }
    }
    worst
}

fn config(k: usize, s: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        components: k,
        samples: s,
        batch_size: batch,
        prior_std: 0.3,
        std_floor: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn classification_elbo_gradients_match_finite_differences() {
    let lik = Likelihood::Classification;
    let data = toy_data(6, 4, lik, 1);
    let mut m = toy_model(4, lik, Method::Ibnn, 2, 1);
    let worst = check(&mut m, &data, &config(2, 2, 6), 0.7);
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn regression_elbo_gradients_match_finite_differences() {
    let lik = Likelihood::Regression { noise_std: 0.5 };
    let data = toy_data(4, 3, lik, 2);
    let mut m = toy_model(3, lik, Method::Ibnn, 2, 2);
    let worst = check(&mut m, &data, &config(2, 1, 4), 1.0);
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn per_datapoint_noise_gradients_match_finite_differences() {
    let lik = Likelihood::Classification;
    let data = toy_data(4, 3, lik, 3);
    let mut m = toy_model(3, lik, Method::Ibnn, 2, 3);
    let cfg = TrainConfig { per_datapoint_noise: true, ..config(2, 2, 4) };
    let worst = check(&mut m, &data, &cfg, 0.5);
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn baseline_elbo_gradients_match_finite_differences() {
    let lik = Likelihood::Classification;
    let data = toy_data(4, 3, lik, 4);
    let mut m = toy_model(3, lik, Method::BnnVi, 1, 4);
    for layer in m.layers_mut() {
        if let ibnn::model::Layer::BnnViDense(l) = layer {
            l.weight_rho.values_mut().iter_mut().for_each(|s| *s = -1.5);
        }
    }
    let worst = check(&mut m, &data, &config(1, 2, 4), 1.0);
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn conv_model_gradients_match_finite_differences() {
    let arch = Architecture::new(
        Method::Ibnn,
        vec![
            LayerSpec::Conv { filters: 2, size: 2, stride: 1, padding: 1, activation: Activation::Relu },
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 3, activation: Activation::Identity },
        ],
    );
    let mut rng = stream(5, Purpose::Init, 0, 0);
    let mut m = Model::build(&arch, &[2, 3, 3], Likelihood::Classification, 2, 0.5, &mut rng).unwrap();
    let x: Vec<f64> = (0..4 * 18).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = Dataset::new(
        Tensor::new(&[4, 2, 3, 3], x).unwrap(),
        Targets::Classes(vec![0, 1, 2, 1]),
        Split::Train,
    )
    .unwrap();
    let worst = check(&mut m, &data, &config(2, 1, 4), 1.0);
    assert!(worst < TOL, "worst relative error {worst}");
}

/// Random elementwise graph of depth two, checked at random points.
fn fd_unary(op: impl Fn(&mut Graph<f64>, ibnn::tensor::NodeId) -> ibnn::tensor::NodeId, x: &[f64]) -> f64 {
    let t = Tensor::new(&[x.len()], x.to_vec()).unwrap().with_grad();
    let mut g = Graph::new();
    let id = g.leaf(&t);
    let y = op(&mut g, id);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let analytic = g.grad(id).unwrap().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let eval = |d: f64| {
            let mut v = x.to_vec();
            v[i] += d;
            let mut g = Graph::new();
            let id = g.leaf(&Tensor::new(&[v.len()], v).unwrap());
            let y = op(&mut g, id);
            let s = g.sum(y);
            g.item(s)
        };
        let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_chain_gradients(x in prop::collection::vec(0.1f64..3.0, 1..6), c in -2.0f64..2.0) {
        let worst = fd_unary(|g, a| {
            let sq = g.square(a);
            let l = g.ln(a).unwrap();
            let m = g.mul(sq, l).unwrap();
            let s = g.scale(m, c);
            g.add_scalar(s, 1.0)
        }, &x);
        prop_assert!(worst < TOL);
    }

    #[test]
    fn matmul_and_log_softmax_gradients(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
        labels in prop::collection::vec(0usize..3, 2),
    ) {
        let ta = Tensor::new(&[2, 3], a.clone()).unwrap().with_grad();
        let tb = Tensor::new(&[3, 3], [b.clone(), vec![0.5, -0.2, 0.1]].concat()).unwrap().with_grad();
        let run = |ta: &Tensor<f64>, tb: &Tensor<f64>, backward: bool| {
            let mut g = Graph::new();
            let (ia, ib) = (g.leaf(ta), g.leaf(tb));
            let h = g.matmul_t(ia, ib).unwrap();
            let lp = g.log_softmax(h).unwrap();
            let l = g.nll_classification(lp, &labels).unwrap();
            if backward {
                g.backward(l).unwrap();
                (g.item(l), g.grad(ia).unwrap().to_vec(), g.grad(ib).unwrap().to_vec())
            } else {
                (g.item(l), vec![], vec![])
            }
        };
        let (_, ga, gb) = run(&ta, &tb, true);
        for (which, grad) in [(0, &ga), (1, &gb)] {
            for i in 0..grad.len() {
                let bump = |d: f64| {
                    let (mut a2, mut b2) = (ta.clone(), tb.clone());
                    if which == 0 { a2.values_mut()[i] += d } else { b2.values_mut()[i] += d }
                    run(&a2, &b2, false).0
                };
                let fd = (bump(STEP) - bump(-STEP)) / (2.0 * STEP);
                prop_assert!(rel_err(grad[i], fd) < TOL, "param {which}[{i}]: {} vs {fd}", grad[i]);
            }
        }
    }
}
