//! Dynamic spatio-temporal graph convolution for traffic forecasting.
//!
//! The crate is generic over the scalar type; the aliases below fix it to
//! `f64`, which is what training and verification use.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod graphops;
pub mod model;
pub mod scalar;
pub mod stc;
pub mod traineval;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tape64 = diffcore::Tape<f64>;
pub type Model64 = model::DstGcnn<f64>;
pub type Model32 = model::DstGcnn<f32>;
pub type Window64 = data::TrainingWindow<f64>;
pub type Dataset64 = data::PreparedDataset<f64>;
