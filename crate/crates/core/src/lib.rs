//! Seeded training of small networks, weight-space symmetries, shadow-model
//! re-alignment and white-box membership-inference features.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the production precision.

pub mod attack;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod realign;
pub mod rng;
pub mod scalar;
pub mod symmetry;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::{SeedBundle, Stream};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type ModelF32 = nn::Model<f32>;
pub type ModelF64 = nn::Model<f64>;
