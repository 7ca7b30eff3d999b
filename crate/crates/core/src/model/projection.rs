//! Projection head mapping pooled encoder states to contrastive embeddings.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamRef, ParamStore, Scope};
use super::tensor::Tensor;
use crate::seed;

/// Slot of the projection head's parameter store in a [`Graph`].
pub const HEAD_SLOT: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
}

/// `z = W₂ · tanh(W₁ · x + b₁) + b₂`
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    config: ProjectionConfig,
    store: ParamStore,
    w1: ParamRef,
    b1: ParamRef,
    w2: ParamRef,
    b2: ParamRef,
}

impl ProjectionHead {
    pub fn new(config: ProjectionConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut store = ParamStore::new(HEAD_SLOT);
        let b_in = 1.0 / (config.d_in as f64).sqrt();
        let b_hid = 1.0 / (config.d_hidden as f64).sqrt();
        let w1 = store.add_uniform("proj.hidden.w", Scope::Projection, config.d_in, config.d_hidden, b_in, &mut rng);
        let b1 = store.add_constant("proj.hidden.b", Scope::Projection, 1, config.d_hidden, 0.0);
        let w2 = store.add_uniform("proj.out.w", Scope::Projection, config.d_hidden, config.d_proj, b_hid, &mut rng);
        let b2 = store.add_constant("proj.out.b", Scope::Projection, 1, config.d_proj, 0.0);
        ProjectionHead {
            config,
            store,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Head with explicitly given weights (`w1: d_in × d_hidden`, `w2: d_hidden × d_proj`).
    pub fn from_weights(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Self {
        let config = ProjectionConfig {
            d_in: w1.rows(),
            d_hidden: w1.cols(),
            d_proj: w2.cols(),
        };
        assert_eq!(w2.rows(), config.d_hidden);
        assert_eq!(b1.shape(), [1, config.d_hidden]);
        assert_eq!(b2.shape(), [1, config.d_proj]);
        let mut store = ParamStore::new(HEAD_SLOT);
        let w1 = store.add("proj.hidden.w", Scope::Projection, w1);
        let b1 = store.add("proj.hidden.b", Scope::Projection, b1);
        let w2 = store.add("proj.out.w", Scope::Projection, w2);
        let b2 = store.add("proj.out.b", Scope::Projection, b2);
        ProjectionHead {
            config,
            store,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn graph_forward(&self, g: &mut Graph<'_>, pooled: NodeId) -> NodeId {
        let h = g.linear(pooled, self.w1, self.b1);
        let h = g.tanh(h);
        g.linear(h, self.w2, self.b2)
    }

    pub fn project(&self, pooled: &[f64]) -> Vec<f64> {
        assert_eq!(pooled.len(), self.config.d_in, "projection input dimension");
        let w1 = self.store.get(self.w1);
        let w2 = self.store.get(self.w2);
        let mut h = self.store.get(self.b1).row(0).to_vec();
        for (i, &x) in pooled.iter().enumerate() {
            for (o, w) in h.iter_mut().zip(w1.row(i)) {
                *o += x * w;
            }
        }
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut z = self.store.get(self.b2).row(0).to_vec();
        for (i, &x) in h.iter().enumerate() {
            for (o, w) in z.iter_mut().zip(w2.row(i)) {
                *o += x * w;
            }
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_zero() {
        let head = ProjectionHead::from_weights(
            Tensor::zeros(3, 4),
            Tensor::zeros(1, 4),
            Tensor::zeros(4, 2),
            Tensor::zeros(1, 2),
        );
        assert_eq!(head.project(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_head_applies_tanh() {
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let head = ProjectionHead::from_weights(eye.clone(), Tensor::zeros(1, 2), eye, Tensor::zeros(1, 2));
        let z = head.project(&[0.5, -1.0]);
        assert_eq!(z, vec![0.5f64.tanh(), (-1.0f64).tanh()]);
        assert!((z[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn output_dimension_is_d_proj() {
        let head = ProjectionHead::new(
            ProjectionConfig {
                d_in: 8,
                d_hidden: 16,
                d_proj: 5,
            },
            3,
        );
        assert_eq!(head.project(&[0.1; 8]).len(), 5);
    }
}
