//! Dual-resolution, dual-encoder salient object segmentation on a small CPU
//! autodiff core: encoders, dense glue, decoder, structure loss, metrics,
//! datasets and a training harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod glue;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = model::SegModel<f32>;
pub type Model64 = model::SegModel<f64>;
