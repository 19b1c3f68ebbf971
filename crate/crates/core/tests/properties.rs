//! Invariants checked over random inputs.

use ibnn::data::{gaussian_mix_with_noise, salt_pepper_corrupt, Dataset, Split, Targets};
use ibnn::metrics::{
    ece, error_and_nll, predict, read_prediction_dump, reliability_diagram, uncertainty_decomposition,
    write_prediction_dump, PredictConfig, PredictionSet,
};
use ibnn::model::{from_bytes, to_bytes, Activation, Architecture, LayerSpec, Likelihood, Method, Model};
use ibnn::posterior::{LatentPrior, MixturePosterior, STD_FLOOR};
use ibnn::rng::{stream, Purpose};
use ibnn::tensor::Tensor;
use ibnn::train::{
    beta_schedule, epoch_batches, lr_schedule, nesterov_update, shuffled_indices, slice_batch, slice_for_component,
    train, SgdParams, TrainConfig,
};
use proptest::prelude::*;
use rand::Rng;

fn random_set(seed: u64, points: usize, samples: usize, classes: usize) -> PredictionSet<f64> {
    let mut rng = stream(seed, Purpose::Data, 0, 0);
    let mut set = PredictionSet::new(classes);
    for _ in 0..points {
        let mut probs = Vec::with_capacity(samples * classes);
        for _ in 0..samples {
            // peaked rows are common in practice, so sharpen some of them
            let sharp = if rng.random::<bool>() { 8.0 } else { 1.0 };
            let logits: Vec<f64> = (0..classes).map(|_| sharp * rng.random::<f64>()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            probs.extend(logits.iter().map(|l| l.exp() / z));
        }
        set.push(probs, rng.random_range(0..classes)).unwrap();
    }
    set
}

fn small_classifier<T: ibnn::Real>(method: Method, k: usize, seed: u64) -> Model<T> {
    let arch = Architecture::new(
        method,
        vec![
            LayerSpec::Dense { out: 6, activation: Activation::Relu },
            LayerSpec::Dense { out: 3, activation: Activation::Identity },
        ],
    );
    Model::build(&arch, &[4], Likelihood::Classification, k, 0.5, &mut stream(seed, Purpose::Init, 0, 0)).unwrap()
}

fn small_data(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = stream(seed, Purpose::Data, 3, 0);
    let x: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>()).collect();
    let y = (0..n).map(|i| i % 3).collect();
    Dataset::new(Tensor::new(&[n, 4], x).unwrap(), Targets::Classes(y), Split::Test).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_init_respects_floor(k in 1usize..6, dim in 1usize..20, sigma0 in 0.01f64..2.0, seed in any::<u64>()) {
        let p = MixturePosterior::<f64>::init(k, dim, sigma0, &mut stream(seed, Purpose::Init, 0, 0)).unwrap();
        prop_assert_eq!(p.means().shape(), &[k, dim][..]);
        prop_assert!(p.is_finite());
        prop_assert!(p.stds().values().iter().all(|&s| s >= STD_FLOOR));
    }

    #[test]
    fn floor_is_restored_after_any_write(vals in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let n = vals.len();
        let mut p = MixturePosterior::<f64>::constant(1, n, 1.0, 0.1).unwrap();
        p.stds_mut().values_mut().copy_from_slice(&vals);
        p.apply_floor();
        prop_assert!(p.stds().values().iter().all(|&s| s >= STD_FLOOR));
        for (&s, &v) in p.stds().values().iter().zip(&vals) {
            if v >= STD_FLOOR {
                prop_assert_eq!(s, v);
            }
        }
    }

    #[test]
    fn mixture_moments_match_direct_sums(k in 1usize..5, dim in 1usize..8, seed in any::<u64>()) {
        let p = MixturePosterior::<f64>::init(k, dim, 0.7, &mut stream(seed, Purpose::Init, 0, 0)).unwrap();
        let (mu, var) = p.mixture_mean_moments();
        for d in 0..dim {
            let m: f64 = (0..k).map(|c| p.component_mean(c)[d]).sum::<f64>() / k as f64;
            let v: f64 = (0..k).map(|c| p.component_std(c)[d].powi(2)).sum::<f64>() / (k * k) as f64;
            prop_assert!((mu[d] - m).abs() <= 1e-14 * m.abs().max(1.0));
            prop_assert!((var[d] - v).abs() <= 1e-14 * v.max(1e-300));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_at_the_prior(k in 1usize..5, dim in 1usize..10, s in 0.05f64..2.0, seed in any::<u64>()) {
        let prior = LatentPrior::new(s).unwrap();
        let p = MixturePosterior::<f64>::init(k, dim, 0.5, &mut stream(seed, Purpose::Init, 0, 0)).unwrap();
        prop_assert!(p.kl_to_prior(&prior) >= -1e-12);
        // one component at mean 1 and std s is the prior itself
        let q = MixturePosterior::<f64>::constant(1, dim, 1.0, s).unwrap();
        prop_assert!(q.kl_to_prior(&prior).abs() < 1e-12);
    }

    #[test]
    fn slices_partition_in_order(k in 1usize..6, per in 1usize..10) {
        let batch: Vec<usize> = (100..100 + k * per).collect();
        let slices = slice_batch(&batch, k).unwrap();
        prop_assert_eq!(slices.len(), k);
        prop_assert!(slices.iter().all(|s| s.len() == per));
        prop_assert_eq!(slices.concat(), batch);
    }

    #[test]
    fn slice_rotation_is_a_bijection(k in 1usize..8, step in 0usize..1000) {
        let mut seen: Vec<usize> = (0..k).map(|c| slice_for_component(c, step, k)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_batches_are_disjoint_multiples_of_k(n in 1usize..300, b in 1usize..64, k in 1usize..6, seed in any::<u64>()) {
        prop_assume!(b.min(n) >= k);
        let order = shuffled_indices(seed, 0, n);
        let batches = epoch_batches(&order, b, k).unwrap();
        let mut seen = vec![false; n];
        for batch in &batches {
            prop_assert!(!batch.is_empty() && batch.len() % k == 0 && batch.len() <= b);
            for &i in batch {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().filter(|&&s| !s).count() < k);
    }

    #[test]
    fn shuffles_are_seeded_permutations(n in 0usize..500, seed in any::<u64>(), epoch in 0usize..50) {
        let a = shuffled_indices(seed, epoch, n);
        prop_assert_eq!(&a, &shuffled_indices(seed, epoch, n));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn schedules_stay_in_range(a in 0usize..50, start in 0usize..50, dur in 0usize..50, frac in 0.001f64..1.0, lam in 1e-4f64..1.0) {
        let mut prev_beta = 0.0;
        let mut prev_lr = lam;
        for e in 0..120 {
            let beta = beta_schedule(e, a);
            prop_assert!((0.0..=1.0).contains(&beta) && beta >= prev_beta);
            let lr = lr_schedule(e, lam, start, dur, frac);
            prop_assert!(lr <= prev_lr + 1e-15 && lr >= frac * lam - 1e-15);
            prev_beta = beta;
            prev_lr = lr;
        }
        prop_assert_eq!(beta_schedule(a, a), 1.0);
    }

    #[test]
    fn zero_momentum_is_plain_sgd(p in prop::collection::vec(-5.0f64..5.0, 1..10), lr in 0.0f64..1.0, wd in 0.0f64..0.1) {
        let g: Vec<f64> = p.iter().map(|x| x.sin()).collect();
        let mut q = p.clone();
        let mut buf = vec![0.0; p.len()];
        nesterov_update(&mut q, &g, &mut buf, SgdParams { lr, momentum: 0.0, weight_decay: wd });
        for i in 0..p.len() {
            prop_assert_eq!(q[i], p[i] - lr * (g[i] + wd * p[i]));
        }
    }

    #[test]
    fn salt_pepper_only_writes_extremes(x in prop::collection::vec(0.0f64..1.0, 1..100), prob in 0.0f64..=1.0, seed in any::<u64>()) {
        let y = salt_pepper_corrupt(&x, prob, &mut stream(seed, Purpose::Corruption, 0, 0)).unwrap();
        prop_assert!(x.iter().zip(&y).all(|(&a, &b)| a == b || b == 0.0 || b == 1.0));
        let same = salt_pepper_corrupt(&x, 0.0, &mut stream(seed, Purpose::Corruption, 0, 0)).unwrap();
        prop_assert_eq!(same, x);
    }

    #[test]
    fn gaussian_mix_is_the_convex_combination(x in prop::collection::vec(0.0f64..1.0, 1..50), gamma in 0.0f64..=1.0) {
        let eps: Vec<f64> = x.iter().map(|v| (7.0 * v).cos() * 3.0).collect();
        let y = gaussian_mix_with_noise(&x, gamma, &eps).unwrap();
        for i in 0..x.len() {
            prop_assert_eq!(y[i], (1.0 - gamma) * x[i] + gamma * eps[i]);
        }
        prop_assert_eq!(gaussian_mix_with_noise(&x, 0.0, &eps).unwrap(), x.clone());
        prop_assert!(gaussian_mix_with_noise(&x, 1.5, &eps).is_err());
    }

    #[test]
    fn metrics_are_bounded(seed in any::<u64>(), points in 1usize..60, samples in 1usize..6, classes in 2usize..6) {
        let set = random_set(seed, points, samples, classes);
        let scores = error_and_nll(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&scores.error) && scores.nll >= 0.0);
        let e = ece(&set, 15).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let bins = reliability_diagram(&set, 15).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), points);
        let r = uncertainty_decomposition(&set).unwrap();
        let cap = (classes as f64).ln() + 1e-12;
        for i in 0..points {
            prop_assert!(r.aleatoric[i] >= 0.0 && r.epistemic[i] >= -1e-12 && r.total[i] <= cap);
        }
    }

    #[test]
    fn prediction_dump_round_trips(seed in any::<u64>(), points in 1usize..20, samples in 1usize..4) {
        let set = random_set(seed, points, samples, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        write_prediction_dump(&set, &path).unwrap();
        prop_assert_eq!(read_prediction_dump::<f64>(&path).unwrap(), set);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), k in 1usize..4, bnn in any::<bool>()) {
        let method = if bnn { Method::BnnVi } else { Method::Ibnn };
        let m = small_classifier::<f32>(method, k, seed);
        let back: Model<f32> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
        // wider scalars are stored at 32 bits, so a second trip is exact
        let bytes = to_bytes(&small_classifier::<f64>(method, k, seed)).unwrap();
        prop_assert_eq!(to_bytes(&from_bytes::<f64>(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn predictions_are_probability_vectors(seed in any::<u64>(), k in 1usize..4, per_point in any::<bool>()) {
        let m = small_classifier::<f64>(Method::Ibnn, k, seed);
        let data = small_data(17, seed);
        let cfg = PredictConfig { samples_per_component: 2, batch: 5, per_datapoint: per_point, seed };
        let set = predict(&m, &data, &cfg).unwrap();
        prop_assert_eq!(set.len(), 17);
        for p in set.points() {
            prop_assert_eq!(p.sample_count(3), 2 * k);
            for row in p.samples(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_keeps_stds_above_floor(seed in 0u64..1000) {
        let mut m = small_classifier::<f64>(Method::Ibnn, 2, seed);
        let data = small_data(24, seed);
        let cfg = TrainConfig {
            lambda0: 0.05,
            lambda1: 0.5,
            components: 2,
            batch_size: 8,
            epochs: 3,
            beta_anneal_epochs: 2,
            lr_anneal_start: 1,
            lr_anneal_duration: 2,
            seed,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg).unwrap();
        for layer in m.layers() {
            if let Some(p) = layer.posterior() {
                prop_assert!(p.is_finite());
                prop_assert!(p.stds().values().iter().all(|&s| s >= STD_FLOOR));
            }
        }
    }
}

#[test]
fn k_must_divide_the_batch_size() {
    let cfg = TrainConfig { batch_size: 10, components: 4, ..TrainConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = TrainConfig { batch_size: 12, components: 4, ..TrainConfig::default() };
    assert!(cfg.validate().is_ok());
}

#[test]
fn predict_rejects_zero_samples() {
    let m = small_classifier::<f64>(Method::Ibnn, 2, 0);
    let cfg = PredictConfig { samples_per_component: 0, ..PredictConfig::default() };
    assert!(predict(&m, &small_data(3, 0), &cfg).is_err());
}
