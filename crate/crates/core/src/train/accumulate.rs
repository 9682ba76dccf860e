//! Gradient accumulation: a batch of `B` samples is processed as `K` equal
//! micro-batches and the gradient is `(1/K) Σₖ ∇ mean_loss(micro-batch k)`.

use super::loss::weighted_cross_entropy;
use crate::dataset::{ExpressionLabel, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mode, Network, RunningUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct AccumulatedStep<T> {
    /// Mean of the micro-batch mean losses, equal to the full-batch mean loss.
    pub loss: T,
    pub grads: Gradients<T>,
    /// Running-statistics updates in micro-batch order; commit them after the step.
    pub running_updates: Vec<RunningUpdate<T>>,
}

pub fn accumulate_gradients<T: Scalar>(
    network: &Network<T>,
    inputs: &Tensor<T>,
    targets: &[ExpressionLabel],
    weights: &[T; NUM_CLASSES],
    micro_batches: usize,
) -> Result<AccumulatedStep<T>> {
    let batch = targets.len();
    if micro_batches == 0 || !batch.is_multiple_of(micro_batches) || batch == 0 {
        return Err(Error::Config(format!(
            "batch of {batch} cannot be split into {micro_batches} equal micro-batches"
        )));
    }
    if inputs.shape().first() != Some(&batch) {
        return Err(Error::Contract(format!(
            "{batch} targets for an input batch of shape {:?}",
            inputs.shape()
        )));
    }
    let size = batch / micro_batches;
    let mut grads = Gradients::zeros_like(network.store());
    let mut running_updates = Vec::new();
    let mut loss = T::zero();
    for k in 0..micro_batches {
        let span = k * size..(k + 1) * size;
        let x = inputs.slice_outer(span.start, span.end);
        let pass = network.forward(&x, Mode::Train)?;
        let (l, dlogits) = weighted_cross_entropy(&pass.logits, &targets[span], weights)?;
        let mut micro = Gradients::zeros_like(network.store());
        network.backward(&pass, &dlogits, &mut micro);
        grads.add_scaled(&micro, T::one());
        running_updates.extend(pass.running_updates);
        loss += l;
    }
    let inv_k = T::one() / T::of_usize(micro_batches);
    grads.scale(inv_k);
    Ok(AccumulatedStep {
        loss: loss * inv_k,
        grads,
        running_updates,
    })
}
