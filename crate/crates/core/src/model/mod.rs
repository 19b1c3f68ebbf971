//! Model definitions: iBNN dense/conv layers, the mean-field BNN-VI
//! baseline, forward passes and checkpoints.
//!
//! A forward pass draws one `z_l` per layer from the chosen component and
//! shares it across all rows of the input passed in. Callers that need a
//! fresh draw per datapoint run one row at a time.

mod checkpoint;
mod layers;

pub use checkpoint::{from_bytes, load, save, to_bytes, FORMAT_VERSION};
pub use layers::{Activation, BnnViDense, IbnnConv, IbnnDense, Layer, ParamGroup};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TargetRef;
use crate::error::{Error, Result};
use crate::posterior::{LatentPrior, MixturePosterior};
use crate::scalar::{Element, Real};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    Classification,
    Regression { noise_std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ibnn,
    BnnVi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        out: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv {
        filters: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    Flatten,
}

fn one() -> usize {
    1
}

/// Declarative architecture: the layer list plus which family to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(default)]
    pub method: Method,
    pub layers: Vec<LayerSpec>,
    /// Weight-prior std of the BNN-VI baseline.
    #[serde(default = "default_bnn_prior_std")]
    pub bnn_prior_std: f64,
    /// Initial weight std of the BNN-VI baseline.
    #[serde(default = "default_bnn_init_std")]
    pub bnn_init_std: f64,
}

fn default_bnn_prior_std() -> f64 {
    1.0
}

fn default_bnn_init_std() -> f64 {
    0.05
}

impl Architecture {
    pub fn new(method: Method, layers: Vec<LayerSpec>) -> Self {
        Self {
            method,
            layers,
            bnn_prior_std: default_bnn_prior_std(),
            bnn_init_std: default_bnn_init_std(),
        }
    }

    /// MLP with ReLU hidden layers and an identity output.
    pub fn mlp(method: Method, hidden: &[usize], out: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&h| LayerSpec::Dense {
                out: h,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            out,
            activation: Activation::Identity,
        });
        Self::new(method, layers)
    }
}

type BnnForward<T> = fn(&BnnViDense<T>, &mut Graph<T>, &[NodeId], NodeId, Option<(Vec<T>, Vec<T>)>) -> Result<NodeId>;

/// Graph handles for every parameter tensor of a model, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    ids: Vec<NodeId>,
    offsets: Vec<usize>,
}

impl ModelNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn layer(&self, i: usize) -> &[NodeId] {
        &self.ids[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Per-layer randomness for one forward pass.
#[derive(Debug, Clone)]
pub enum LayerNoise<T> {
    /// No perturbation; the baseline uses its weight means.
    Unit,
    /// A fixed `z` (iBNN layers only).
    Given(Vec<T>),
    /// Reparameterised draw `μ_k + σ_k ∘ ε`.
    Component { k: usize, eps: Vec<T> },
    /// Baseline weight and bias noise.
    Weights(Vec<T>, Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    likelihood: Likelihood,
    weights_frozen: bool,
}

impl<T: Element> Model<T> {
    /// Validates layer compatibility and a shared component count.
    pub fn new(layers: Vec<Layer<T>>, input_shape: &[usize], likelihood: Likelihood) -> Result<Self> {
        let m = Self {
            layers,
            input_shape: input_shape.to_vec(),
            likelihood,
            weights_frozen: false,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut k = None;
        for p in self.layers.iter().filter_map(Layer::posterior) {
            match k {
                None => k = Some(p.components()),
                Some(k) if k != p.components() => {
                    return Err(Error::Config(format!(
                        "all layers must share K: found {k} and {}",
                        p.components()
                    )))
                }
                _ => {}
            }
        }
        let out = self.output_shape()?;
        match self.likelihood {
            Likelihood::Regression { noise_std } => {
                if out != [1] {
                    return Err(Error::dim("regression output", &out, &[1]));
                }
                if !(noise_std > 0.0) {
                    return Err(Error::Config("regression noise_std must be positive".into()));
                }
            }
            Likelihood::Classification => {
                if out.len() != 1 {
                    return Err(Error::dim("classification output", &out, &[]));
                }
            }
        }
        Ok(())
    }

    /// Per-sample output shape, checking every layer boundary.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = match (layer, shape.as_slice()) {
                (Layer::IbnnDense(l), [d]) if *d == l.in_dim() => vec![l.out_dim()],
                (Layer::BnnViDense(l), [d]) if *d == l.in_dim() => vec![l.out_dim()],
                (Layer::IbnnConv(l), [c, h, w]) if *c == l.in_channels() => {
                    let (oh, ow) = l.output_hw(*h, *w)?;
                    vec![l.filters(), oh, ow]
                }
                (Layer::Flatten, s) => vec![s.iter().product()],
                (_, s) => return Err(Error::dim("layer input", s, &layer_input_hint(layer))),
            };
        }
        Ok(shape)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    /// Shared component count `K`; 1 for models without latent layers.
    pub fn components(&self) -> usize {
        self.layers
            .iter()
            .find_map(Layer::posterior)
            .map_or(1, MixturePosterior::components)
    }

    pub fn has_latents(&self) -> bool {
        self.layers.iter().any(|l| l.posterior().is_some())
    }

    pub fn is_baseline(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BnnViDense(_)))
    }

    /// Number of network weights and biases.
    pub fn network_params(&self) -> usize {
        self.layers.iter().map(Layer::network_params).sum()
    }

    pub fn params(&self) -> Vec<(&Tensor<T>, ParamGroup)> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors().into_iter().map(|(_, t, g)| (t, g)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, ParamGroup)> {
        self.layers.iter_mut().flat_map(Layer::tensors_mut).collect()
    }

    pub fn zero_grad(&mut self) {
        for (t, _) in self.params_mut() {
            t.zero_grad();
        }
    }

    pub fn apply_floor(&mut self) {
        self.layers.iter_mut().for_each(Layer::apply_floor);
    }

    pub fn weights_frozen(&self) -> bool {
        self.weights_frozen
    }

    /// Stops (or resumes) gradient tracking on deterministic `U`, `b`.
    pub fn freeze_weights(&mut self, frozen: bool) {
        self.weights_frozen = frozen;
        for (t, g) in self.params_mut() {
            if g == ParamGroup::Weights {
                t.set_requires_grad(!frozen);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelNodes {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for layer in &self.layers {
            ids.extend(layer.tensors().into_iter().map(|(_, t, _)| g.leaf(t)));
            offsets.push(ids.len());
        }
        ModelNodes { ids, offsets }
    }

    /// Runs the layer stack with explicit per-layer noise. Weight noise on
    /// baseline layers needs a floating-point scalar; see `forward_with_noise`.
    pub fn forward_with_latents(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        x: NodeId,
        noise: Vec<LayerNoise<T>>,
    ) -> Result<NodeId> {
        self.run_layers(g, nodes, x, noise, |l, g, ids, h, eps| match eps {
            None => l.forward_mean(g, ids, h),
            Some(_) => Err(Error::Config("weight noise needs a floating-point scalar".into())),
        })
    }

    fn run_layers(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        x: NodeId,
        noise: Vec<LayerNoise<T>>,
        bnn: BnnForward<T>,
    ) -> Result<NodeId> {
        if noise.len() != self.layers.len() {
            return Err(Error::dim("layer noise", &[noise.len()], &[self.layers.len()]));
        }
        let mut h = x;
        for (i, (layer, noise)) in self.layers.iter().zip(noise).enumerate() {
            let ids = nodes.layer(i);
            h = match layer {
                Layer::IbnnDense(_) | Layer::IbnnConv(_) => {
                    let posterior = layer.posterior().expect("latent layer");
                    let z = match noise {
                        LayerNoise::Unit => None,
                        LayerNoise::Given(z) => {
                            if z.len() != posterior.dim() {
                                return Err(Error::dim("z", &[z.len()], &[posterior.dim()]));
                            }
                            Some(g.constant(&[z.len()], z)?)
                        }
                        LayerNoise::Component { k, eps } => {
                            let pn = layer.posterior_nodes(ids);
                            Some(posterior.sample_with_noise(g, pn, k, eps)?)
                        }
                        LayerNoise::Weights(..) => {
                            return Err(Error::Config("weight noise given to a latent layer".into()))
                        }
                    };
                    match layer {
                        Layer::IbnnDense(l) => l.forward(g, ids[0], ids[1], h, z)?,
                        Layer::IbnnConv(l) => l.forward(g, ids[0], ids[1], h, z)?,
                        _ => unreachable!(),
                    }
                }
                Layer::BnnViDense(l) => {
                    let eps = match noise {
                        LayerNoise::Weights(w, b) => Some((w, b)),
                        LayerNoise::Unit => None,
                        _ => return Err(Error::Config("latent noise given to a BNN-VI layer".into())),
                    };
                    bnn(l, g, ids, h, eps)?
                }
                Layer::Flatten => {
                    let shape = g.shape(h).to_vec();
                    let rest: usize = shape[1..].iter().product();
                    g.reshape(h, &[shape[0], rest])?
                }
            };
        }
        Ok(h)
    }

    /// Forward with no perturbation: the deterministic network.
    pub fn forward_unit(&self, g: &mut Graph<T>, nodes: &ModelNodes, x: NodeId) -> Result<NodeId> {
        let noise = vec![LayerNoise::Unit; self.layers.len()];
        self.forward_with_latents(g, nodes, x, noise)
    }

    /// Forward with one fixed `z` per latent layer, in layer order.
    pub fn forward_with_z(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        x: NodeId,
        zs: &[Vec<T>],
    ) -> Result<NodeId> {
        let mut it = zs.iter();
        let mut noise = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            noise.push(match layer.posterior() {
                Some(_) => LayerNoise::Given(
                    it.next()
                        .ok_or_else(|| Error::Config("too few z vectors".into()))?
                        .clone(),
                ),
                None => LayerNoise::Unit,
            });
        }
        if it.next().is_some() {
            return Err(Error::Config("too many z vectors".into()));
        }
        self.forward_with_latents(g, nodes, x, noise)
    }

    /// Forward through the implicit weights `U · diag(z)` with unperturbed inputs.
    pub fn forward_implicit(&self, g: &mut Graph<T>, x: NodeId, zs: &[Vec<T>]) -> Result<NodeId> {
        let mut it = zs.iter();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::IbnnDense(l) => {
                    let z = it.next().ok_or_else(|| Error::Config("too few z vectors".into()))?;
                    let w = g.leaf(&l.implicit_weights(z)?);
                    let b = g.leaf(&l.bias);
                    l.forward(g, w, b, h, None)?
                }
                Layer::IbnnConv(l) => {
                    let z = it.next().ok_or_else(|| Error::Config("too few z vectors".into()))?;
                    let w = g.leaf(&l.implicit_weights(z)?);
                    let b = g.leaf(&l.bias);
                    l.forward(g, w, b, h, None)?
                }
                Layer::BnnViDense(l) => {
                    let ids = [g.leaf(&l.weight_mean), g.leaf(&l.weight_rho), g.leaf(&l.bias_mean), g.leaf(&l.bias_rho)];
                    l.forward_mean(g, &ids, h)?
                }
                Layer::Flatten => {
                    let shape = g.shape(h).to_vec();
                    let rest: usize = shape[1..].iter().product();
                    g.reshape(h, &[shape[0], rest])?
                }
            };
        }
        Ok(h)
    }

    /// Flattened `U_l · diag(μ_{l,k})` over all latent layers, layer order, row-major.
    pub fn export_component_weights(&self, k: usize) -> Result<Vec<T>> {
        self.export_with(|p| {
            p.check_component(k)?;
            Ok(p.component_mean(k).to_vec())
        })
    }

    /// Flattened deterministic `U` over all latent layers.
    pub fn export_deterministic_weights(&self) -> Result<Vec<T>> {
        self.export_with(|p| Ok(vec![T::one(); p.dim()]))
    }

    fn export_with(&self, z_of: impl Fn(&MixturePosterior<T>) -> Result<Vec<T>>) -> Result<Vec<T>> {
        if self.is_baseline() {
            return Err(Error::Config("weight export needs a model without BNN-VI layers".into()));
        }
        let mut out = Vec::new();
        for layer in &self.layers {
            let w = match layer {
                Layer::IbnnDense(l) => l.implicit_weights(&z_of(&l.posterior)?)?,
                Layer::IbnnConv(l) => l.implicit_weights(&z_of(&l.posterior)?)?,
                _ => continue,
            };
            out.extend_from_slice(w.values());
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of a forward output.
    pub fn nll(&self, g: &mut Graph<T>, out: NodeId, targets: TargetRef<'_, T>) -> Result<NodeId>
    where
        T: Real,
    {
        match (self.likelihood, targets) {
            (Likelihood::Classification, TargetRef::Classes(c)) => {
                let lp = g.log_softmax(out)?;
                g.nll_classification(lp, c)
            }
            (Likelihood::Regression { noise_std }, TargetRef::Values(v)) => {
                g.gaussian_nll(out, v, T::lit(noise_std))
            }
            _ => Err(Error::Data("target kind does not match the model likelihood".into())),
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds and initialises a model from a declarative architecture.
    pub fn build<R: Rng + ?Sized>(
        arch: &Architecture,
        input_shape: &[usize],
        likelihood: Likelihood,
        k: usize,
        sigma0: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if arch.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let layer = match (spec, arch.method, shape.as_slice()) {
                (&LayerSpec::Dense { out, activation }, Method::Ibnn, &[d]) => {
                    Layer::IbnnDense(IbnnDense::init(d, out, k, sigma0, activation, rng)?)
                }
                (&LayerSpec::Dense { out, activation }, Method::BnnVi, &[d]) => Layer::BnnViDense(
                    BnnViDense::init(d, out, arch.bnn_prior_std, arch.bnn_init_std, activation, rng)?,
                ),
                (
                    &LayerSpec::Conv {
                        filters,
                        size,
                        stride,
                        padding,
                        activation,
                    },
                    Method::Ibnn,
                    &[c, _, _],
                ) => Layer::IbnnConv(IbnnConv::init(
                    c, filters, size, stride, padding, k, sigma0, activation, rng,
                )?),
                (LayerSpec::Conv { .. }, Method::BnnVi, _) => {
                    return Err(Error::Config("the BNN-VI baseline supports dense layers only".into()))
                }
                (LayerSpec::Flatten, _, _) => Layer::Flatten,
                (spec, _, s) => {
                    return Err(Error::Config(format!("layer {spec:?} cannot take input shape {s:?}")))
                }
            };
            let probe = Model {
                layers: vec![layer.clone()],
                input_shape: shape.clone(),
                likelihood: Likelihood::Classification,
                weights_frozen: false,
            };
            shape = probe.output_shape()?;
            layers.push(layer);
        }
        Self::new(layers, input_shape, likelihood)
    }

    /// Draws fresh noise for every layer: component `k` for latent layers,
    /// a weight sample for baseline layers.
    pub fn draw_noise<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<LayerNoise<T>>> {
        self.layers
            .iter()
            .map(|layer| {
                Ok(match layer {
                    Layer::IbnnDense(_) | Layer::IbnnConv(_) => {
                        let p = layer.posterior().expect("latent layer");
                        p.check_component(k)?;
                        LayerNoise::Component { k, eps: p.draw_noise(rng) }
                    }
                    Layer::BnnViDense(l) => {
                        let (w, b) = l.draw_noise(rng);
                        LayerNoise::Weights(w, b)
                    }
                    Layer::Flatten => LayerNoise::Unit,
                })
            })
            .collect()
    }

    /// Runs the layer stack with explicit per-layer noise.
    pub fn forward_with_noise(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        x: NodeId,
        noise: Vec<LayerNoise<T>>,
    ) -> Result<NodeId> {
        self.run_layers(g, nodes, x, noise, BnnViDense::forward)
    }

    /// One stochastic forward pass with a `z` per layer from component `k`.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        nodes: &ModelNodes,
        x: NodeId,
        k: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        let noise = self.draw_noise(k, rng)?;
        self.forward_with_noise(g, nodes, x, noise)
    }

    /// Convenience wrapper returning the output as a tensor.
    pub fn sample_output<R: Rng + ?Sized>(&self, x: &Tensor<T>, k: usize, rng: &mut R) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let xi = g.leaf(x);
        let out = self.forward_sample(&mut g, &nodes, xi, k, rng)?;
        Ok(g.to_tensor(out))
    }

    /// `Σ_l KL` on the graph: mixture-mean KL for latent layers, weight KL for baseline layers.
    pub fn kl_on(&self, g: &mut Graph<T>, nodes: &ModelNodes, prior: &LatentPrior<T>) -> Result<Option<NodeId>> {
        let mut total: Option<NodeId> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let ids = nodes.layer(i);
            let part = match layer {
                Layer::IbnnDense(_) | Layer::IbnnConv(_) => {
                    let p = layer.posterior().expect("latent layer");
                    p.kl_on(g, layer.posterior_nodes(ids), prior)?
                }
                Layer::BnnViDense(l) => l.kl_on(g, ids)?,
                Layer::Flatten => continue,
            };
            total = Some(match total {
                Some(t) => g.add(t, part)?,
                None => part,
            });
        }
        Ok(total)
    }

    /// Closed-form `Σ_l KL` without a graph.
    pub fn kl_value(&self, prior: &LatentPrior<T>) -> T {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::IbnnDense(l) => l.posterior.kl_to_prior(prior),
                Layer::IbnnConv(l) => l.posterior.kl_to_prior(prior),
                Layer::BnnViDense(l) => l.kl(),
                Layer::Flatten => T::zero(),
            })
            .sum()
    }

    /// Copies `U`, `b` from a pretrained model with identical layer shapes and
    /// re-initialises every latent posterior.
    pub fn load_pretrained<R: Rng + ?Sized>(
        &mut self,
        source: &Model<T>,
        sigma0: f64,
        freeze: bool,
        rng: &mut R,
    ) -> Result<()> {
        if source.layers.len() != self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "pretrained model has {} layers, expected {}",
                source.layers.len(),
                self.layers.len()
            )));
        }
        let k = self.components();
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            match (dst, src) {
                (Layer::IbnnDense(d), Layer::IbnnDense(s)) => {
                    copy_checked(&mut d.weight, &s.weight)?;
                    copy_checked(&mut d.bias, &s.bias)?;
                    d.posterior = MixturePosterior::init(k, d.in_dim(), sigma0, rng)?;
                }
                (Layer::IbnnConv(d), Layer::IbnnConv(s)) => {
                    if (d.stride, d.padding) != (s.stride, s.padding) {
                        return Err(Error::Checkpoint("conv stride/padding differ".into()));
                    }
                    copy_checked(&mut d.kernel, &s.kernel)?;
                    copy_checked(&mut d.bias, &s.bias)?;
                    d.posterior = MixturePosterior::init(k, d.in_channels(), sigma0, rng)?;
                }
                (Layer::Flatten, Layer::Flatten) => {}
                _ => return Err(Error::Checkpoint("pretrained layer kinds differ".into())),
            }
        }
        self.freeze_weights(freeze);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|(t, _)| t.values().iter().all(|v| v.is_finite()))
    }
}

fn copy_checked<T: Element>(dst: &mut Tensor<T>, src: &Tensor<T>) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: {:?} vs {:?}",
            dst.shape(),
            src.shape()
        )));
    }
    dst.values_mut().copy_from_slice(src.values());
    Ok(())
}

fn layer_input_hint<T: Element>(layer: &Layer<T>) -> Vec<usize> {
    match layer {
        Layer::IbnnDense(l) => vec![l.in_dim()],
        Layer::BnnViDense(l) => vec![l.in_dim()],
        Layer::IbnnConv(l) => vec![l.in_channels(), 0, 0],
        Layer::Flatten => vec![],
    }
}
