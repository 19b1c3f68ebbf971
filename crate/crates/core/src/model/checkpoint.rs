//! Checkpoint files.
//!
//! Layout: one line of compact JSON (the header, terminated by `\n`)
//! followed by raw little-endian `f32` arrays in header order. For every
//! layer the arrays are `U` (or kernel), `b`, posterior means, posterior
//! stds; baseline layers store weight means, weight stds, bias means, bias
//! stds. Values are rounded to `f32` on save, so a load/save cycle
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{Activation, BnnViDense, IbnnConv, IbnnDense, Layer};
use super::{Likelihood, Model};
use crate::error::{Error, Result};
use crate::posterior::MixturePosterior;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "ibnn-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    likelihood: Likelihood,
    components: usize,
    layers: Vec<LayerHeader>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LayerHeader {
    IbnnDense { activation: Activation },
    IbnnConv { stride: usize, padding: usize, activation: Activation },
    BnnViDense { activation: Activation, prior_std: f64 },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    layer: usize,
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let layers = model
        .layers()
        .iter()
        .map(|l| match l {
            Layer::IbnnDense(d) => LayerHeader::IbnnDense { activation: d.activation },
            Layer::IbnnConv(c) => LayerHeader::IbnnConv {
                stride: c.stride,
                padding: c.padding,
                activation: c.activation,
            },
            Layer::BnnViDense(b) => LayerHeader::BnnViDense {
                activation: b.activation,
                prior_std: b.prior_std.to_f64_lossy(),
            },
            Layer::Flatten => LayerHeader::Flatten,
        })
        .collect();
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        for (name, t, _) in layer.tensors() {
            tensors.push(TensorHeader {
                layer: i,
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for &v in t.values() {
                let f = v.to_f32().ok_or_else(|| Error::NonFinite(format!("checkpoint {name}")))?;
                data.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        likelihood: model.likelihood(),
        components: model.components(),
        layers,
        tensors,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format != FORMAT_NAME {
        return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let payload = &bytes[nl + 1..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }

    let mut cursor = 0;
    let mut tensors = header.tensors.iter();
    let mut next = |layer: usize, name: &str| -> Result<Tensor<T>> {
        let th = tensors
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name} for layer {layer}")))?;
        if th.layer != layer || th.name != name {
            return Err(Error::Checkpoint(format!(
                "expected {name} of layer {layer}, found {} of layer {}",
                th.name, th.layer
            )));
        }
        let n: usize = th.shape.iter().product();
        let values = payload[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|c| {
                let f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                T::from_f32(f).ok_or_else(|| Error::Checkpoint("value not representable".into()))
            })
            .collect::<Result<Vec<T>>>()?;
        cursor += 4 * n;
        Tensor::new(&th.shape, values).map_err(|e| Error::Checkpoint(e.to_string()))
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.iter().enumerate() {
        let layer = match *lh {
            LayerHeader::IbnnDense { activation } => {
                let (w, b) = (next(i, "weight")?, next(i, "bias")?);
                let post = MixturePosterior::from_parts(next(i, "means")?, next(i, "stds")?)?;
                Layer::IbnnDense(IbnnDense::new(w, b, post, activation)?)
            }
            LayerHeader::IbnnConv {
                stride,
                padding,
                activation,
            } => {
                let (w, b) = (next(i, "kernel")?, next(i, "bias")?);
                let post = MixturePosterior::from_parts(next(i, "means")?, next(i, "stds")?)?;
                Layer::IbnnConv(IbnnConv::new(w, b, post, stride, padding, activation)?)
            }
            LayerHeader::BnnViDense { activation, prior_std } => {
                let weight_mean = next(i, "weight_mean")?.with_grad();
                let weight_rho = next(i, "weight_rho")?.with_grad();
                let bias_mean = next(i, "bias_mean")?.with_grad();
                let bias_rho = next(i, "bias_rho")?.with_grad();
                if weight_mean.shape() != weight_rho.shape()
                    || bias_mean.shape() != bias_rho.shape()
                    || weight_mean.shape().len() != 2
                    || bias_mean.shape() != [weight_mean.shape()[0]]
                {
                    return Err(Error::Checkpoint(format!("inconsistent BNN-VI shapes in layer {i}")));
                }
                Layer::BnnViDense(BnnViDense {
                    weight_mean,
                    weight_rho,
                    bias_mean,
                    bias_rho,
                    prior_std: T::lit(prior_std),
                    activation,
                })
            }
            LayerHeader::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    if tensors.next().is_some() {
        return Err(Error::Checkpoint("header lists extra tensors".into()));
    }
    let model = Model::new(layers, &header.input_shape, header.likelihood)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if model.components() != header.components {
        return Err(Error::Checkpoint(format!(
            "header declares K={}, layers have K={}",
            header.components,
            model.components()
        )));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
