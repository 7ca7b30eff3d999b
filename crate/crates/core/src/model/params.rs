//! Named parameter storage and matching gradient buffers.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::seed::Rng;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    Encoder,
    Decoder,
    Projection,
}

/// Handle to a parameter: the store slot it lives in and its index there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub(crate) slot: usize,
    pub(crate) index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub scope: Scope,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    slot: usize,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(slot: usize) -> Self {
        ParamStore {
            slot,
            params: Vec::new(),
        }
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn add(&mut self, name: impl Into<String>, scope: Scope, value: Tensor) -> ParamRef {
        self.params.push(Param {
            name: name.into(),
            scope,
            value,
        });
        ParamRef {
            slot: self.slot,
            index: self.params.len() - 1,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        scope: Scope,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut Rng,
    ) -> ParamRef {
        let data = (0..rows * cols)
            .map(|_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..=bound) })
            .collect();
        self.add(name, scope, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        scope: Scope,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamRef {
        self.add(name, scope, Tensor::from_vec(rows, cols, vec![value; rows * cols]))
    }

    #[inline]
    pub fn get(&self, r: ParamRef) -> &Tensor {
        debug_assert_eq!(r.slot, self.slot);
        &self.params[r.index].value
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        debug_assert_eq!(r.slot, self.slot);
        &mut self.params[r.index].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> + '_ {
        (0..self.params.len()).map(move |index| ParamRef {
            slot: self.slot,
            index,
        })
    }
}

/// Gradient buffers shaped like a list of parameter stores.
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Vec<Tensor>>,
}

impl Grads {
    pub fn zeros_like(stores: &[&ParamStore]) -> Self {
        let slots = stores
            .iter()
            .enumerate()
            .map(|(i, s)| {
                assert_eq!(s.slot(), i, "stores must be passed in slot order");
                s.params()
                    .iter()
                    .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                    .collect()
            })
            .collect();
        Grads { slots }
    }

    #[inline]
    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.slots[r.slot][r.index]
    }

    #[inline]
    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.slots[r.slot][r.index]
    }

    pub fn slot(&self, slot: usize) -> &[Tensor] {
        &self.slots[slot]
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().flatten().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.slots.iter_mut().flatten().for_each(|t| t.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Name of the first parameter whose gradient is not finite.
    pub fn first_non_finite<'a>(&self, stores: &[&'a ParamStore]) -> Option<&'a str> {
        for (slot, grads) in self.slots.iter().enumerate() {
            for (i, g) in grads.iter().enumerate() {
                if !g.is_finite() {
                    return Some(&stores[slot].params()[i].name);
                }
            }
        }
        None
    }
}
