//! Implicitly Bayesian neural networks.
//!
//! Deterministic weights `U`, `b` with a multiplicative latent variable on
//! every layer input, `f_l = act(U_l (z_l ∘ f_{l-1}) + b_l)`, where each
//! `z_l` has a K-component Gaussian mixture posterior. The implied weight
//! distribution is `W = U · diag(z)`.
//!
//! Everything numeric is generic over the scalar: [`scalar::Element`] for
//! the structural graph operations (exact rationals work there) and
//! [`scalar::Real`] for the rest. Concrete `f64` aliases are exported at the
//! crate root for everyday use.

// `!(x >= 0)` is how NaN is rejected alongside negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod posterior;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::{Element, Real};

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type MixturePosterior = posterior::MixturePosterior<f64>;
pub type LatentPrior = posterior::LatentPrior<f64>;
pub type Model = model::Model<f64>;
pub type Layer = model::Layer<f64>;
pub type TrainConfig = train::TrainConfig;
pub type Dataset = data::Dataset<f64>;
pub type PredictionSet = metrics::PredictionSet<f64>;
pub type UncertaintyReport = metrics::UncertaintyReport<f64>;
