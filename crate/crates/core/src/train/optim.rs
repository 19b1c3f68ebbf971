//! SGD with Nesterov momentum, PyTorch convention.
//!
//! With gradient `g`, decay `λ`, momentum `μ` and buffer `v`:
//! `g ← g + λ·p`, `v ← μ·v + g`, `p ← p − lr·(g + μ·v)`.
//! With `μ = 0` this is plain SGD.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Updates `params` in place from `grads`, using and refreshing `buffer`.
pub fn nesterov_update<T: Real>(params: &mut [T], grads: &[T], buffer: &mut [T], hp: SgdParams) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), buffer.len());
    let (lr, mu, wd) = (T::lit(hp.lr), T::lit(hp.momentum), T::lit(hp.weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(buffer.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p = *p - lr * (g + mu * *v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_hand_steps() {
        // p=1, g=0.5 constant, lr=0.1, mu=0.9, wd=0
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut p = [1.0f64];
        let mut v = [0.0];
        nesterov_update(&mut p, &[0.5], &mut v, hp);
        // v = 0.5, p = 1 - 0.1*(0.5 + 0.45) = 0.905
        assert!((p[0] - 0.905).abs() < 1e-15);
        nesterov_update(&mut p, &[0.5], &mut v, hp);
        // v = 0.95, p = 0.905 - 0.1*(0.5 + 0.855) = 0.7695
        assert!((p[0] - 0.7695).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let hp = SgdParams { lr: 1.0, momentum: 0.0, weight_decay: 0.1 };
        let mut p = [2.0f64];
        let mut v = [0.0];
        nesterov_update(&mut p, &[0.0], &mut v, hp);
        assert!((p[0] - 1.8).abs() < 1e-15);
    }
}
