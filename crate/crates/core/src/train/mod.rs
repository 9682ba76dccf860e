//! Weighted cross-entropy, momentum SGD over two learning-rate groups,
//! gradient accumulation, evaluation and the training loop.

pub mod accumulate;
pub mod data;
pub mod evaluate;
pub mod loss;
pub mod run;
pub mod sgd;

pub use accumulate::{accumulate_gradients, AccumulatedStep};
pub use data::{resolve_path, stack, ImageSet};
pub use evaluate::{argmax, evaluate, probabilities, Evaluation};
pub use loss::{per_sample_losses, softmax, weighted_cross_entropy};
pub use run::{
    meta_path, read_meta, resolve_class_weights, run_training, CheckpointMeta, ClassWeighting,
    RngState, StopReason, TrainConfig, TrainOutcome, TrainState, TrainingRun, ValidationRecord,
    BEST_CHECKPOINT, LAST_CHECKPOINT, LOSS_TRACE, TRAIN_LOG, WEIGHTS_FILE,
};
pub use sgd::{sgd_update, LrGroup, Sgd};
