//! Multi-exit network training with partitioned features and pruned
//! gradient routing, built on a small reverse-mode tape that counts every
//! matrix-product operation exactly.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{Mode, Model, ModelConfig};
pub use tensor::Tensor;
