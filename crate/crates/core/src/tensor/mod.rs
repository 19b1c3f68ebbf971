//! Dense tensors and a reverse-mode differentiation graph.
//!
//! Parameters live in [`Tensor`]s owned by the model. A training step copies
//! them into a fresh [`Graph`] as leaves, records the forward computation,
//! runs [`Graph::backward`] and accumulates leaf gradients back into the
//! owning tensors with [`Graph::accumulate_into`].
//!
//! # Broadcasting
//!
//! Only two patterns are supported by `broadcast_mul` / `broadcast_add`:
//!
//! * a `[N, D]` matrix with a `[D]` vector, applied to every row;
//! * a `[N, C, H, W]` activation with a `[C]` vector, applied to every
//!   spatial position of channel `c`.
//!
//! Everything else is a dimension error.

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, NodeId};
pub(crate) use graph::softplus;

use crate::error::{Error, Result};
use crate::scalar::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != values.len() {
            return Err(Error::dim("tensor", shape, &[values.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; numel(shape)]).expect("shape with positive extents")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[], vec![v]).expect("scalar")
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b = *b + v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Element at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < d, "axis {i} index {ix} >= {d}");
            flat = flat * d + ix;
        }
        self.values[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.values.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.values.len());
        }
        Ok(self)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(&[2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::new(&[2, 0], Vec::<f64>::new()).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0f64; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap().with_grad();
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        t.accumulate_grad(&[0.5, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 3.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn multi_index_is_row_major() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}
