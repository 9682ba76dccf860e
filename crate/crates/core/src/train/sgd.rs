//! SGD with momentum and coupled weight decay:
//! `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// One scalar step of the recurrence; returns `(θ', v')`.
pub fn sgd_update<T: Scalar>(
    theta: T,
    velocity: T,
    grad: T,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> (T, T) {
    let v = momentum * velocity + (grad + weight_decay * theta);
    (theta - lr * v, v)
}

/// A set of parameters sharing one learning rate.
#[derive(Clone, Copy, Debug)]
pub struct LrGroup<'a, T> {
    pub params: &'a [ParamId],
    pub lr: T,
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    /// Velocity per parameter name; created lazily as zeros.
    buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<T>> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Vec<T>>) {
        self.buffers = buffers;
    }

    /// Updates every parameter in `groups`. Nothing is modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        groups: &[LrGroup<'_, T>],
    ) -> Result<()> {
        for group in groups {
            for &id in group.params {
                if !grads.get(id).all_finite() {
                    return Err(Error::Training(format!(
                        "non-finite gradient for parameter {}; step aborted",
                        store.name(id)
                    )));
                }
            }
        }
        for group in groups {
            for &id in group.params {
                let name = store.name(id).to_string();
                let theta = store.get_mut(id);
                let v = self
                    .buffers
                    .entry(name)
                    .or_insert_with(|| vec![T::zero(); theta.len()]);
                for ((t, v), &g) in theta
                    .data_mut()
                    .iter_mut()
                    .zip(v.iter_mut())
                    .zip(grads.get(id).data())
                {
                    (*t, *v) = sgd_update(*t, *v, g, group.lr, self.momentum, self.weight_decay);
                }
            }
        }
        Ok(())
    }
}
