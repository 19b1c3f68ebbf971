use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{normal, MixturePosterior, PosteriorNodes, STD_FLOOR};
use crate::scalar::{Element, Real};
use crate::tensor::{softplus, Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Element>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Identity => g.identity(x),
        }
    }
}

/// Which learning-rate / weight-decay group a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Deterministic `U`, `b`: annealed `λ0`, weight decay.
    Weights,
    /// Latent-posterior means and stds: constant `λ1`, no decay.
    Variational,
    /// Mean-field weight posterior of the baseline: annealed `λ0`, no decay.
    WeightPosterior,
}

/// Dense layer with a multiplicative latent on each input feature.
#[derive(Debug, Clone, PartialEq)]
pub struct IbnnDense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub posterior: MixturePosterior<T>,
    pub activation: Activation,
}

/// Convolution with one latent per input channel, shared across positions.
#[derive(Debug, Clone, PartialEq)]
pub struct IbnnConv<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub posterior: MixturePosterior<T>,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

/// Mean-field Gaussian posterior directly over weights and biases.
///
/// Stds are parametrised as `σ = floor + softplus(ρ)`, so they stay above
/// the floor without clamping and the `1/σ` KL gradient cannot throw a
/// clamped std far away in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnViDense<T> {
    pub weight_mean: Tensor<T>,
    pub weight_rho: Tensor<T>,
    pub bias_mean: Tensor<T>,
    pub bias_rho: Tensor<T>,
    /// Std of the zero-mean Gaussian weight prior.
    pub prior_std: T,
    pub activation: Activation,
}

/// PyTorch-style default: `U(-1/√fan_in, 1/√fan_in)`.
fn uniform_fan_in<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, v).expect("shape is non-empty").with_grad()
}

impl<T: Element> IbnnDense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, posterior: MixturePosterior<T>, activation: Activation) -> Result<Self> {
        let [out, inp] = weight.shape() else {
            return Err(Error::dim("dense weight", weight.shape(), &[]));
        };
        if bias.shape() != [*out] {
            return Err(Error::dim("dense bias", bias.shape(), &[*out]));
        }
        if posterior.dim() != *inp {
            return Err(Error::dim("dense posterior", &[posterior.dim()], &[*inp]));
        }
        Ok(Self {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
            posterior,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `act((U · diag(z)) x + b)` for `x: [n, in]`, `z: [in]`.
    ///
    /// Scales the columns of `U` rather than the input, so the result is
    /// bit-identical to running the implicit weights on a clean input.
    pub fn forward(&self, g: &mut Graph<T>, weight: NodeId, bias: NodeId, x: NodeId, z: Option<NodeId>) -> Result<NodeId> {
        let w = match z {
            Some(z) => g.broadcast_mul(weight, z)?,
            None => weight,
        };
        let h = g.matmul_t(x, w)?;
        let h = g.broadcast_add(h, bias)?;
        Ok(self.activation.apply(g, h))
    }

    /// `act(U (z ∘ x) + b)`: the perturbation applied to the input nodes.
    pub fn forward_scaled_input(&self, g: &mut Graph<T>, weight: NodeId, bias: NodeId, x: NodeId, z: NodeId) -> Result<NodeId> {
        let input = g.broadcast_mul(x, z)?;
        let h = g.matmul_t(input, weight)?;
        let h = g.broadcast_add(h, bias)?;
        Ok(self.activation.apply(g, h))
    }

    /// Implicit weights `U · diag(z)`: column `n` of `U` scaled by `z_n`.
    pub fn implicit_weights(&self, z: &[T]) -> Result<Tensor<T>> {
        if z.len() != self.in_dim() {
            return Err(Error::dim("implicit_weights", &[z.len()], &[self.in_dim()]));
        }
        let inp = self.in_dim();
        let v = self
            .weight
            .values()
            .iter()
            .enumerate()
            .map(|(i, &u)| u * z[i % inp])
            .collect();
        Tensor::new(self.weight.shape(), v)
    }
}

impl<T: Element> IbnnConv<T> {
    pub fn new(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        posterior: MixturePosterior<T>,
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Result<Self> {
        let [f, c, _, _] = kernel.shape() else {
            return Err(Error::dim("conv kernel", kernel.shape(), &[]));
        };
        if bias.shape() != [*f] {
            return Err(Error::dim("conv bias", bias.shape(), &[*f]));
        }
        if posterior.dim() != *c {
            return Err(Error::dim("conv posterior", &[posterior.dim()], &[*c]));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(Self {
            kernel: kernel.with_grad(),
            bias: bias.with_grad(),
            posterior,
            stride,
            padding,
            activation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// Convolution with each input-channel slice of the kernel scaled by `z_c`.
    pub fn forward(&self, g: &mut Graph<T>, kernel: NodeId, bias: NodeId, x: NodeId, z: Option<NodeId>) -> Result<NodeId> {
        let k = match z {
            Some(z) => g.broadcast_mul(kernel, z)?,
            None => kernel,
        };
        let h = g.conv2d(x, k, self.stride, self.padding)?;
        let h = g.broadcast_add(h, bias)?;
        Ok(self.activation.apply(g, h))
    }

    /// Convolution of the channel-scaled input `z ∘ x`.
    pub fn forward_scaled_input(&self, g: &mut Graph<T>, kernel: NodeId, bias: NodeId, x: NodeId, z: NodeId) -> Result<NodeId> {
        let input = g.broadcast_mul(x, z)?;
        let h = g.conv2d(input, kernel, self.stride, self.padding)?;
        let h = g.broadcast_add(h, bias)?;
        Ok(self.activation.apply(g, h))
    }

    /// Kernel with input-channel slice `c` scaled by `z_c`.
    pub fn implicit_weights(&self, z: &[T]) -> Result<Tensor<T>> {
        let [_, c, kh, kw] = *self.kernel.shape() else { unreachable!() };
        if z.len() != c {
            return Err(Error::dim("implicit_weights", &[z.len()], &[c]));
        }
        let taps = kh * kw;
        let v = self
            .kernel
            .values()
            .iter()
            .enumerate()
            .map(|(i, &u)| u * z[(i / taps) % c])
            .collect();
        Tensor::new(self.kernel.shape(), v)
    }

    /// Spatial output extent for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let [_, _, kh, kw] = *self.kernel.shape() else { unreachable!() };
        let ext = |size: usize, k: usize| -> Option<usize> {
            let span = (size + 2 * self.padding).checked_sub(k)?;
            (span % self.stride == 0).then_some(span / self.stride + 1)
        };
        match (ext(h, kh), ext(w, kw)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::dim("conv2d", &[h, w], self.kernel.shape())),
        }
    }
}

impl<T: Element> BnnViDense<T> {
    pub fn in_dim(&self) -> usize {
        self.weight_mean.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight_mean.shape()[0]
    }

    /// Forward through the weight means only.
    pub fn forward_mean(&self, g: &mut Graph<T>, nodes: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.matmul_t(x, nodes[0])?;
        let h = g.broadcast_add(h, nodes[2])?;
        Ok(self.activation.apply(g, h))
    }
}

impl<T: Real> BnnViDense<T> {
    /// `floor + softplus(ρ)`
    pub fn std_of(rho: T) -> T {
        T::lit(STD_FLOOR) + softplus(rho)
    }

    /// Inverse of [`Self::std_of`] for `std > floor`.
    pub fn rho_for(std: T) -> T {
        (std - T::lit(STD_FLOOR)).exp_m1().ln()
    }

    pub fn weight_std(&self) -> Vec<T> {
        self.weight_rho.values().iter().map(|&r| Self::std_of(r)).collect()
    }

    pub fn bias_std(&self) -> Vec<T> {
        self.bias_rho.values().iter().map(|&r| Self::std_of(r)).collect()
    }

    fn std_node(g: &mut Graph<T>, rho: NodeId) -> NodeId {
        let sp = g.softplus(rho);
        g.add_scalar(sp, T::lit(STD_FLOOR))
    }

    /// Forward with given weight/bias noise (`None` uses the means).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        nodes: &[NodeId],
        x: NodeId,
        eps: Option<(Vec<T>, Vec<T>)>,
    ) -> Result<NodeId> {
        let Some((ew, eb)) = eps else {
            return self.forward_mean(g, nodes, x);
        };
        let ew = g.constant(self.weight_mean.shape(), ew)?;
        let eb = g.constant(self.bias_mean.shape(), eb)?;
        let sdw = Self::std_node(g, nodes[1]);
        let sdb = Self::std_node(g, nodes[3]);
        let sw = g.mul(sdw, ew)?;
        let sb = g.mul(sdb, eb)?;
        let w = g.add(nodes[0], sw)?;
        let b = g.add(nodes[2], sb)?;
        let h = g.matmul_t(x, w)?;
        let h = g.broadcast_add(h, b)?;
        Ok(self.activation.apply(g, h))
    }

    pub fn init<R: Rng + ?Sized>(
        inp: usize,
        out: usize,
        prior_std: f64,
        init_std: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if !(prior_std > 0.0) || !(init_std > STD_FLOOR) {
            return Err(Error::Config(format!(
                "BNN-VI prior_std must be positive and init_std above {STD_FLOOR}"
            )));
        }
        let rho = Self::rho_for(T::lit(init_std));
        Ok(Self {
            weight_mean: uniform_fan_in(&[out, inp], inp, rng),
            weight_rho: Tensor::full(&[out, inp], rho).with_grad(),
            bias_mean: uniform_fan_in(&[out], inp, rng),
            bias_rho: Tensor::full(&[out], rho).with_grad(),
            prior_std: T::lit(prior_std),
            activation,
        })
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<T>, Vec<T>) {
        let ew = (0..self.weight_mean.len()).map(|_| T::lit(normal(rng))).collect();
        let eb = (0..self.bias_mean.len()).map(|_| T::lit(normal(rng))).collect();
        (ew, eb)
    }

    /// Closed-form `KL(q(W, b) ‖ N(0, σ_w² I))`.
    pub fn kl(&self) -> T {
        let s = self.prior_std;
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let (ws, bs) = (self.weight_std(), self.bias_std());
        let pairs = self
            .weight_mean
            .values()
            .iter()
            .zip(&ws)
            .chain(self.bias_mean.values().iter().zip(&bs));
        pairs
            .map(|(&m, &sd)| (s / sd).ln() + (sd * sd + m * m) / (two * s * s) - half)
            .sum()
    }

    pub fn kl_on(&self, g: &mut Graph<T>, nodes: &[NodeId]) -> Result<NodeId> {
        let s = self.prior_std;
        let half = T::lit(0.5);
        let mut total = None;
        for (m, rho) in [(nodes[0], nodes[1]), (nodes[2], nodes[3])] {
            let n = g.value(m).len();
            let sd = Self::std_node(g, rho);
            let log_sd = g.ln(sd)?;
            let neg_log = g.scale(log_sd, T::zero() - T::one());
            let sd2 = g.square(sd);
            let m2 = g.square(m);
            let quad = g.add(sd2, m2)?;
            let quad = g.scale(quad, T::one() / (T::lit(2.0) * s * s));
            let per = g.add(quad, neg_log)?;
            let sum = g.sum(per);
            let part = g.add_scalar(sum, T::from_count(n) * (s.ln() - half));
            total = Some(match total {
                Some(t) => g.add(t, part)?,
                None => part,
            });
        }
        Ok(total.expect("two parameter pairs"))
    }
}

impl<T: Real> IbnnDense<T> {
    pub fn init<R: Rng + ?Sized>(
        inp: usize,
        out: usize,
        k: usize,
        sigma0: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = uniform_fan_in(&[out, inp], inp, rng);
        let bias = uniform_fan_in(&[out], inp, rng);
        let posterior = MixturePosterior::init(k, inp, sigma0, rng)?;
        Self::new(weight, bias, posterior, activation)
    }
}

impl<T: Real> IbnnConv<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        filters: usize,
        size: usize,
        stride: usize,
        padding: usize,
        k: usize,
        sigma0: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = channels * size * size;
        let kernel = uniform_fan_in(&[filters, channels, size, size], fan_in, rng);
        let bias = uniform_fan_in(&[filters], fan_in, rng);
        let posterior = MixturePosterior::init(k, channels, sigma0, rng)?;
        Self::new(kernel, bias, posterior, stride, padding, activation)
    }
}

/// One layer of a [`super::Model`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    IbnnDense(IbnnDense<T>),
    IbnnConv(IbnnConv<T>),
    BnnViDense(BnnViDense<T>),
    /// `[n, c, h, w] → [n, c·h·w]`
    Flatten,
}

impl<T: Element> Layer<T> {
    pub fn posterior(&self) -> Option<&MixturePosterior<T>> {
        match self {
            Layer::IbnnDense(l) => Some(&l.posterior),
            Layer::IbnnConv(l) => Some(&l.posterior),
            _ => None,
        }
    }

    pub fn posterior_mut(&mut self) -> Option<&mut MixturePosterior<T>> {
        match self {
            Layer::IbnnDense(l) => Some(&mut l.posterior),
            Layer::IbnnConv(l) => Some(&mut l.posterior),
            _ => None,
        }
    }

    /// Parameter tensors in binding / checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>, ParamGroup)> {
        use ParamGroup::*;
        match self {
            Layer::IbnnDense(l) => vec![
                ("weight", &l.weight, Weights),
                ("bias", &l.bias, Weights),
                ("means", l.posterior.means(), Variational),
                ("stds", l.posterior.stds(), Variational),
            ],
            Layer::IbnnConv(l) => vec![
                ("kernel", &l.kernel, Weights),
                ("bias", &l.bias, Weights),
                ("means", l.posterior.means(), Variational),
                ("stds", l.posterior.stds(), Variational),
            ],
            Layer::BnnViDense(l) => vec![
                ("weight_mean", &l.weight_mean, WeightPosterior),
                ("weight_rho", &l.weight_rho, WeightPosterior),
                ("bias_mean", &l.bias_mean, WeightPosterior),
                ("bias_rho", &l.bias_rho, WeightPosterior),
            ],
            Layer::Flatten => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut Tensor<T>, ParamGroup)> {
        use ParamGroup::*;
        match self {
            Layer::IbnnDense(l) => {
                let (m, s) = split_posterior(&mut l.posterior);
                vec![(&mut l.weight, Weights), (&mut l.bias, Weights), (m, Variational), (s, Variational)]
            }
            Layer::IbnnConv(l) => {
                let (m, s) = split_posterior(&mut l.posterior);
                vec![(&mut l.kernel, Weights), (&mut l.bias, Weights), (m, Variational), (s, Variational)]
            }
            Layer::BnnViDense(l) => vec![
                (&mut l.weight_mean, WeightPosterior),
                (&mut l.weight_rho, WeightPosterior),
                (&mut l.bias_mean, WeightPosterior),
                (&mut l.bias_rho, WeightPosterior),
            ],
            Layer::Flatten => vec![],
        }
    }

    pub fn tensor_count(&self) -> usize {
        match self {
            Layer::Flatten => 0,
            _ => 4,
        }
    }

    /// Weights plus biases of the network function (baseline counts means only).
    pub fn network_params(&self) -> usize {
        match self {
            Layer::IbnnDense(l) => l.weight.len() + l.bias.len(),
            Layer::IbnnConv(l) => l.kernel.len() + l.bias.len(),
            Layer::BnnViDense(l) => l.weight_mean.len() + l.bias_mean.len(),
            Layer::Flatten => 0,
        }
    }

    /// Re-applies std floors after an update.
    pub fn apply_floor(&mut self) {
        match self {
            Layer::IbnnDense(l) => l.posterior.apply_floor(),
            Layer::IbnnConv(l) => l.posterior.apply_floor(),
            Layer::BnnViDense(_) => {}
            Layer::Flatten => {}
        }
    }

    pub(crate) fn posterior_nodes(&self, nodes: &[NodeId]) -> PosteriorNodes {
        PosteriorNodes {
            means: nodes[2],
            stds: nodes[3],
        }
    }
}

fn split_posterior<T: Element>(p: &mut MixturePosterior<T>) -> (&mut Tensor<T>, &mut Tensor<T>) {
    p.parts_mut()
}
