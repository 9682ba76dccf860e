//! Dataset ingestion, harmonization and class statistics.

pub mod label;
pub mod manifest;
pub mod parse;
pub mod synth;
pub mod weights;

pub use label::{ExpressionLabel, CLASS_NAMES, NUM_CLASSES};
pub use manifest::{merge_datasets, DatasetManifest, Sample, Source, Split, MANIFEST_HEADER};
pub use parse::{
    parse_affwild2_annotations, parse_expw_annotations, CropNaming, FrameLayout, LabelMap,
    ParseOutcome,
};
pub use synth::{generate_synthetic_dataset, render_signature, SynthSpec};
pub use weights::{
    compute_class_weights, compute_distribution, round2, ClassDistribution, ClassWeights,
    WeightsRecord,
};
