use super::data::ImageSet;
use super::loss::softmax;
use crate::augment::EvalPipeline;
use crate::dataset::{ExpressionLabel, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{expression_criterion, ConfusionMatrix, EvalReport, Prediction};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub matrix: ConfusionMatrix,
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of each logit row.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<[T; NUM_CLASSES]> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            let p = softmax(row);
            std::array::from_fn(|c| p[c])
        })
        .collect()
}

/// Scores a network in inference mode over every sample of `data`.
pub fn evaluate<T: Scalar>(
    network: &Network<T>,
    data: &ImageSet<T>,
    pipeline: &EvalPipeline,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Domain(
            "cannot evaluate on a manifest with zero samples".into(),
        ));
    }
    let batch_size = batch_size.max(1);
    let mut matrix = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, truth) = data.batch(chunk, pipeline, 0)?;
        let logits = network.infer(&x)?;
        let predicted: Vec<ExpressionLabel> = logits
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| ExpressionLabel::from_index(argmax(row)))
            .collect::<Result<_>>()?;
        matrix.update(&truth, &predicted)?;
        for ((&i, &t), &p) in chunk.iter().zip(&truth).zip(&predicted) {
            let sample = data.sample(i);
            predictions.push(Prediction {
                path: sample.image_path.display().to_string(),
                frame_index: sample.frame_index,
                true_label: t,
                predicted_label: p,
            });
        }
    }
    Ok(Evaluation {
        report: expression_criterion(&matrix)?,
        matrix,
        predictions,
    })
}
