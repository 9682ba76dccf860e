//! Seven-class facial expression recognition pipeline.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = augment::Image<f32>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
