//! Training-time augmentation and input preparation.

pub mod image;
pub mod jitter;
pub mod pipeline;

pub use self::image::{horizontal_flip, resize_bilinear, Image};
pub use jitter::{color_jitter, JitterConfig, JitterFactors, JitterOp};
pub use pipeline::{
    build_eval_pipeline, build_train_pipeline, EvalPipeline, ImageTensorSpec, Normalization,
    TrainPipeline, Transform,
};
