//! Gradient-isolated auxiliary self-supervision for domain generalization,
//! with one-sample test-time adaptation of the auxiliary block.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below fix the precision for common use.

pub mod datasets;
pub mod error;
pub mod evalproto;
pub mod image;
pub mod netcore;
pub mod nn;
pub mod optim;
pub mod osadapt;
pub mod params;
pub mod permset;
pub mod rng;
pub mod scalar;
pub mod sstasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use netcore::{Batch, GeosModel, ModelConfig, Profile};
pub use permset::{Permutation, PermutationSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{Mode, TrainConfig};

pub type GeosModelF32 = GeosModel<f32>;
pub type GeosModelF64 = GeosModel<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}
