//! Squeeze-and-excitation channel gating.
//!
//! `z = mean_hw(x)`, `gate = sigmoid(W2 · relu(W1 · z + b1) + b2)`,
//! `y[c, h, w] = gate[c] · x[c, h, w]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, relu, relu_backward, Linear};
use super::store::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeBlockConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlockConfig {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "SE block needs channels ({channels}) divisible by reduction ({reduction})"
            )));
        }
        Ok(SeBlockConfig {
            channels,
            reduction,
        })
    }

    pub fn bottleneck_width(&self) -> usize {
        self.channels / self.reduction
    }
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub config: SeBlockConfig,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct SeCache<T> {
    input: Tensor<T>,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

impl<T> SeCache<T> {
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

impl SeBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: SeBlockConfig,
        rng: &mut R,
    ) -> Self {
        let hidden = config.bottleneck_width();
        SeBlock {
            config,
            fc1: Linear::new(store, &format!("{name}.fc1"), config.channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, config.channels, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, SeCache<T>)> {
        if x.shape().len() != 4 || x.shape()[1] != self.config.channels {
            return Err(Error::Contract(format!(
                "SE block over {} channels got input {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        let plane = x.shape()[2] * x.shape()[3];
        let pooled = global_avg_pool(x)?;
        let hidden = relu(&self.fc1.forward(store, &pooled)?);
        let gate = self.fc2.forward(store, &hidden)?.map(sigmoid);
        let mut y = x.clone();
        for (chunk, &g) in y.data_mut().chunks_mut(plane).zip(gate.data()) {
            for v in chunk {
                *v *= g;
            }
        }
        Ok((
            y,
            SeCache {
                input: x.clone(),
                pooled,
                hidden,
                gate,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &SeCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let shape = cache.input.shape();
        let plane = shape[2] * shape[3];
        let x = cache.input.data();
        // Gradient through the channel scaling, both to x and to the gate.
        let mut dx = dy.clone();
        let mut dgate_pre = Vec::with_capacity(cache.gate.len());
        for (p, &g) in cache.gate.data().iter().enumerate() {
            let span = p * plane..(p + 1) * plane;
            let dgate: T = dy.data()[span.clone()]
                .iter()
                .zip(&x[span.clone()])
                .map(|(&d, &v)| d * v)
                .sum();
            for v in &mut dx.data_mut()[span] {
                *v *= g;
            }
            dgate_pre.push(dgate * g * (T::one() - g));
        }
        let dgate_pre = Tensor::from_vec(cache.gate.shape(), dgate_pre).expect("gate shape");
        let dhidden = self.fc2.backward(store, &cache.hidden, &dgate_pre, grads);
        let dhidden = relu_backward(&cache.hidden, &dhidden);
        let dpooled = self.fc1.backward(store, &cache.pooled, &dhidden, grads);
        let inv = T::one() / T::of_usize(plane);
        for (chunk, &dp) in dx.data_mut().chunks_mut(plane).zip(dpooled.data()) {
            let add = dp * inv;
            for v in chunk {
                *v += add;
            }
        }
        dx
    }
}
