//! Adaptive moment estimation.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Scope};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Moment estimates for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    /// beta1^t and beta2^t, kept as running products.
    decay: (f64, f64),
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            decay: (1.0, 1.0),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter whose scope passes `trainable`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], trainable: impl Fn(Scope) -> bool) {
        self.t += 1;
        let c = &self.config;
        self.decay = (self.decay.0 * c.beta1, self.decay.1 * c.beta2);
        let bc1 = 1.0 - self.decay.0;
        let bc2 = 1.0 - self.decay.1;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !trainable(p.scope) {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(0);
        let r = store.add("x", Scope::Encoder, Tensor::row_vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let x = store.get(r).clone();
            let g = x.map(|v| 2.0 * v);
            adam.step(&mut store, &[g], |_| true);
        }
        assert!(store.get(r).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_scopes_do_not_move() {
        let mut store = ParamStore::new(0);
        let r = store.add("dec", Scope::Decoder, Tensor::row_vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::row_vector(vec![5.0])], |s| s != Scope::Decoder);
        assert_eq!(store.get(r).data(), &[1.0]);
    }
}
