//! Mixture-of-Gaussians posterior over a layer's latent input variables.
//!
//! Each of the `K` components is a diagonal Gaussian over the `dim` input
//! nodes of a layer. The KL term against the `N(1, s²)` prior is computed on
//! the Gaussian `q̂` of the averaged variable `(1/K) Σ_k z_k`:
//!
//! ```text
//! μ̂ = (1/K) Σ_k μ_k        σ̂² = (1/K²) Σ_k σ_k²
//! KL = Σ_d  ln(s/σ̂) + (σ̂² + (μ̂ − 1)²) / (2s²) − 1/2
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{Element, Real};
use crate::tensor::{Graph, NodeId, Tensor};

/// Lower bound applied to every standard deviation after each update.
pub const STD_FLOOR: f64 = 1e-6;

/// Mean and std of the standard-deviation initialiser.
pub const INIT_STD_MEAN: f64 = 0.05;
pub const INIT_STD_SPREAD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior<T> {
    means: Tensor<T>,
    stds: Tensor<T>,
    std_floor: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPrior<T> {
    prior_std: T,
}

impl<T: Element> LatentPrior<T> {
    pub fn new(prior_std: T) -> Result<Self> {
        if !(prior_std > T::zero()) {
            return Err(Error::Config(format!("prior_std must be positive, got {prior_std:?}")));
        }
        Ok(Self { prior_std })
    }

    pub fn std(&self) -> T {
        self.prior_std
    }
}

/// Graph handles for a posterior's two parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorNodes {
    pub means: NodeId,
    pub stds: NodeId,
}

impl<T: Element> MixturePosterior<T> {
    /// Builds a posterior from `[K, dim]` means and stds.
    pub fn from_parts(means: Tensor<T>, stds: Tensor<T>) -> Result<Self> {
        if means.shape().len() != 2 || means.shape() != stds.shape() {
            return Err(Error::dim("posterior", means.shape(), stds.shape()));
        }
        let floor = T::from_f64(STD_FLOOR).unwrap_or_else(T::zero);
        let mut p = Self {
            means: means.with_grad(),
            stds: stds.with_grad(),
            std_floor: floor,
        };
        p.apply_floor();
        Ok(p)
    }

    /// All components at `mean` with std `std`.
    pub fn constant(k: usize, dim: usize, mean: T, std: T) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("posterior needs K >= 1 and dim >= 1".into()));
        }
        Self::from_parts(Tensor::full(&[k, dim], mean), Tensor::full(&[k, dim], std))
    }

    pub fn components(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn means(&self) -> &Tensor<T> {
        &self.means
    }

    pub fn stds(&self) -> &Tensor<T> {
        &self.stds
    }

    pub fn means_mut(&mut self) -> &mut Tensor<T> {
        &mut self.means
    }

    pub fn stds_mut(&mut self) -> &mut Tensor<T> {
        &mut self.stds
    }

    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.means, &mut self.stds)
    }

    pub fn component_mean(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.means.values()[k * d..(k + 1) * d]
    }

    pub fn component_std(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.stds.values()[k * d..(k + 1) * d]
    }

    pub fn std_floor(&self) -> T {
        self.std_floor
    }

    /// Changes the floor; zero is allowed for exact-reduction tests.
    pub fn set_std_floor(&mut self, floor: T) {
        self.std_floor = floor;
        self.apply_floor();
    }

    pub fn apply_floor(&mut self) {
        let floor = self.std_floor;
        for s in self.stds.values_mut() {
            if !(*s >= floor) {
                *s = floor;
            }
        }
    }

    pub fn check_component(&self, k: usize) -> Result<()> {
        if k >= self.components() {
            return Err(Error::IndexOutOfRange {
                what: "posterior component",
                index: k,
                len: self.components(),
            });
        }
        Ok(())
    }

    /// Moments of the averaged variable: `μ̂ = (1/K)Σμ_k`, `σ̂² = (1/K²)Σσ_k²`.
    pub fn mixture_mean_moments(&self) -> (Vec<T>, Vec<T>) {
        let (k, d) = (self.components(), self.dim());
        let kk = T::from_count(k);
        let mut mu = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for c in 0..k {
            for j in 0..d {
                mu[j] = mu[j] + self.means.values()[c * d + j];
                let s = self.stds.values()[c * d + j];
                var[j] = var[j] + s * s;
            }
        }
        for j in 0..d {
            mu[j] = mu[j] / kk;
            var[j] = var[j] / (kk * kk);
        }
        (mu, var)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> PosteriorNodes {
        PosteriorNodes {
            means: g.leaf(&self.means),
            stds: g.leaf(&self.stds),
        }
    }

    /// Reparameterised draw on a graph with a caller-supplied `ε`:
    /// `z = μ_k + σ_k ∘ ε`.
    pub fn sample_with_noise(
        &self,
        g: &mut Graph<T>,
        nodes: PosteriorNodes,
        k: usize,
        eps: Vec<T>,
    ) -> Result<NodeId> {
        self.check_component(k)?;
        let mu = g.select_row(nodes.means, k)?;
        let sd = g.select_row(nodes.stds, k)?;
        let eps = g.constant(&[self.dim()], eps)?;
        let spread = g.mul(sd, eps)?;
        g.add(mu, spread)
    }
}

impl<T: Real> MixturePosterior<T> {
    /// Means i.i.d. `N(1, σ0²)`, stds i.i.d. `N(0.05, 0.02²)`, clamped to the floor.
    pub fn init<R: Rng + ?Sized>(k: usize, dim: usize, sigma0: f64, rng: &mut R) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("posterior needs K >= 1 and dim >= 1".into()));
        }
        if !(sigma0 >= 0.0) {
            return Err(Error::Config(format!("sigma0 must be >= 0, got {sigma0}")));
        }
        let n = k * dim;
        let means = (0..n)
            .map(|_| T::lit(1.0 + sigma0 * normal(rng)))
            .collect();
        let stds = (0..n)
            .map(|_| T::lit(INIT_STD_MEAN + INIT_STD_SPREAD * normal(rng)))
            .collect();
        Self::from_parts(Tensor::new(&[k, dim], means)?, Tensor::new(&[k, dim], stds)?)
    }

    /// Standard-normal `ε` of this posterior's dimension.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        (0..self.dim()).map(|_| T::lit(normal(rng))).collect()
    }

    /// A plain draw from component `k`.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<T>> {
        self.check_component(k)?;
        let eps = self.draw_noise(rng);
        Ok(self
            .component_mean(k)
            .iter()
            .zip(self.component_std(k))
            .zip(eps)
            .map(|((&m, &s), e)| m + s * e)
            .collect())
    }

    /// Differentiable draw from component `k` on a graph.
    pub fn sample_on<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        nodes: PosteriorNodes,
        k: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let eps = self.draw_noise(rng);
        self.sample_with_noise(g, nodes, k, eps)
    }

    /// Closed-form `KL(q̂ ‖ N(1, s²))`, summed over nodes.
    pub fn kl_to_prior(&self, prior: &LatentPrior<T>) -> T {
        let (mu, var) = self.mixture_mean_moments();
        let s = prior.std();
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        mu.iter()
            .zip(&var)
            .map(|(&m, &v)| {
                let d = m - T::one();
                (s.ln() - half * v.ln()) + (v + d * d) / (two * s * s) - half
            })
            .sum()
    }

    /// The same KL recorded on a graph, differentiable in every mean and std.
    pub fn kl_on(
        &self,
        g: &mut Graph<T>,
        nodes: PosteriorNodes,
        prior: &LatentPrior<T>,
    ) -> Result<NodeId> {
        let k = T::from_count(self.components());
        let s = prior.std();
        let half = T::lit(0.5);

        let mu_sum = g.sum_rows(nodes.means)?;
        let mu_hat = g.scale(mu_sum, T::one() / k);
        let sq = g.square(nodes.stds);
        let var_sum = g.sum_rows(sq)?;
        let var_hat = g.scale(var_sum, T::one() / (k * k));

        let log_var = g.ln(var_hat)?;
        let neg_half_log = g.scale(log_var, T::zero() - half);
        let centred = g.add_scalar(mu_hat, T::zero() - T::one());
        let centred_sq = g.square(centred);
        let spread = g.add(var_hat, centred_sq)?;
        let quad = g.scale(spread, T::one() / (T::lit(2.0) * s * s));
        let per_node = g.add(quad, neg_half_log)?;
        let total = g.sum(per_node);
        let constant = T::from_count(self.dim()) * (s.ln() - half);
        Ok(g.add_scalar(total, constant))
    }

    pub fn is_finite(&self) -> bool {
        self.means
            .values()
            .iter()
            .chain(self.stds.values())
            .all(|v| v.is_finite())
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn rng() -> crate::rng::StreamRng {
        stream(11, Purpose::Init, 0, 0)
    }

    #[test]
    fn zero_sigma0_gives_unit_means() {
        let p = MixturePosterior::<f64>::init(3, 5, 0.0, &mut rng()).unwrap();
        assert!(p.means().values().iter().all(|&m| m == 1.0));
        assert!(p.stds().values().iter().all(|&s| s >= STD_FLOOR));
    }

    #[test]
    fn init_moments_follow_sigma0() {
        let p = MixturePosterior::<f64>::init(1, 100_000, 0.75, &mut rng()).unwrap();
        let v = p.means().values();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((std - 0.75).abs() < 0.02, "std {std}");
    }

    #[test]
    fn nonpositive_stds_are_clamped() {
        let stds = Tensor::new(&[1, 3], vec![-0.5, 0.0, 0.2]).unwrap();
        let p = MixturePosterior::from_parts(Tensor::full(&[1, 3], 1.0), stds).unwrap();
        assert_eq!(p.stds().values(), &[STD_FLOOR, STD_FLOOR, 0.2]);
    }

    #[test]
    fn sample_index_checked() {
        let p = MixturePosterior::<f64>::constant(2, 3, 1.0, 0.1).unwrap();
        assert!(matches!(
            p.sample(2, &mut rng()),
            Err(Error::IndexOutOfRange { index: 2, len: 2, .. })
        ));
    }

    #[test]
    fn floor_sample_is_near_mean() {
        let p = MixturePosterior::<f64>::constant(1, 4, 1.0, 0.0).unwrap();
        let z = p.sample(0, &mut rng()).unwrap();
        assert!(z.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn sample_moments() {
        let p = MixturePosterior::<f64>::constant(1, 100_000, 0.9, 0.1).unwrap();
        let z = p.sample(0, &mut rng()).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 0.9).abs() < 0.002, "mean {mean}");
        assert!((std - 0.1).abs() < 0.002, "std {std}");
    }

    #[test]
    fn sample_gradient_wrt_mean_is_ones() {
        let p = MixturePosterior::<f64>::constant(2, 3, 1.0, 0.2).unwrap();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g);
        let z = p.sample_on(&mut g, nodes, 1, &mut rng()).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(nodes.means).unwrap(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn moments_single_and_pair() {
        let p = MixturePosterior::from_parts(
            Tensor::new(&[1, 2], vec![0.7, 1.3]).unwrap(),
            Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap(),
        )
        .unwrap();
        let (mu, var) = p.mixture_mean_moments();
        assert_eq!(mu, vec![0.7, 1.3]);
        assert_eq!(var, vec![0.1 * 0.1, 0.2 * 0.2]);

        let p = MixturePosterior::<f64>::from_parts(
            Tensor::new(&[2, 1], vec![0.9, 1.1]).unwrap(),
            Tensor::new(&[2, 1], vec![0.1, 0.1]).unwrap(),
        )
        .unwrap();
        let (mu, var) = p.mixture_mean_moments();
        assert!((mu[0] - 1.0).abs() < 1e-15);
        assert!((var[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_at_prior() {
        let prior = LatentPrior::new(0.3).unwrap();
        let p = MixturePosterior::<f64>::constant(1, 4, 1.0, 0.3).unwrap();
        assert!(p.kl_to_prior(&prior).abs() < 1e-15);
    }

    #[test]
    fn kl_hand_value() {
        // ln 6 + 0.0025 / 0.18 − 0.5
        let expected = 6f64.ln() + 0.0025 / 0.18 - 0.5;
        assert!((expected - 1.30565).abs() < 1e-5);
        let prior = LatentPrior::new(0.3).unwrap();
        let p = MixturePosterior::<f64>::constant(1, 1, 1.0, 0.05).unwrap();
        assert!((p.kl_to_prior(&prior) - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_graph_matches_closed_form_and_is_stationary_in_mean() {
        let prior = LatentPrior::new(0.3).unwrap();
        let p = MixturePosterior::<f64>::from_parts(
            Tensor::new(&[2, 2], vec![0.8, 1.1, 1.2, 0.9]).unwrap().with_grad(),
            Tensor::new(&[2, 2], vec![0.1, 0.2, 0.05, 0.3]).unwrap().with_grad(),
        )
        .unwrap();
        let mut g = Graph::new();
        let nodes = p.bind(&mut g);
        let kl = p.kl_on(&mut g, nodes, &prior).unwrap();
        assert!((g.item(kl) - p.kl_to_prior(&prior)).abs() < 1e-12);
        g.backward(kl).unwrap();
        // μ̂ = 1 on both nodes, so the mean gradient vanishes.
        assert!(g.grad(nodes.means).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn prior_std_must_be_positive() {
        assert!(LatentPrior::new(0.0f64).is_err());
        assert!(LatentPrior::new(-1.0f64).is_err());
    }
}
