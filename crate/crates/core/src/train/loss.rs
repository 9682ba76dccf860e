//! Class-weighted cross-entropy with a plain-mean reduction:
//! `L = (1/N) Σᵢ -w[yᵢ] · log softmax(zᵢ)[yᵢ]`.
//!
//! The plain mean keeps equal-sized micro-batch means averaging to the
//! full-batch mean, which is what gradient accumulation relies on.

use crate::dataset::{ExpressionLabel, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check<T: Scalar>(logits: &Tensor<T>, targets: &[ExpressionLabel]) -> Result<usize> {
    match *logits.shape() {
        [n, NUM_CLASSES] if n == targets.len() && n > 0 => {}
        ref s => {
            return Err(Error::Contract(format!(
                "loss expects {}×{NUM_CLASSES} logits, got {s:?}",
                targets.len()
            )))
        }
    }
    if !logits.all_finite() {
        return Err(Error::Contract("loss received non-finite logits".into()));
    }
    Ok(targets.len())
}

/// `-w[y] · log softmax(z)[y]` for each sample.
pub fn per_sample_losses<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[ExpressionLabel],
    weights: &[T; NUM_CLASSES],
) -> Result<Vec<T>> {
    check(logits, targets)?;
    Ok(logits
        .data()
        .chunks(NUM_CLASSES)
        .zip(targets)
        .map(|(row, y)| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            weights[y.index()] * (lse - row[y.index()])
        })
        .collect())
}

/// Mean weighted loss and its gradient with respect to the logits.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[ExpressionLabel],
    weights: &[T; NUM_CLASSES],
) -> Result<(T, Tensor<T>)> {
    let losses = per_sample_losses(logits, targets, weights)?;
    let inv_n = T::one() / T::of_usize(targets.len());
    let loss = losses.into_iter().sum::<T>() * inv_n;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, y) in logits.data().chunks(NUM_CLASSES).zip(targets) {
        let scale = weights[y.index()] * inv_n;
        for (c, p) in softmax(row).into_iter().enumerate() {
            let onehot = if c == y.index() { T::one() } else { T::zero() };
            grad.push(scale * (p - onehot));
        }
    }
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}
