//! Causal block-wise video diffusion at toy scale.
//!
//! A bidirectional diffusion transformer is trained on procedurally rendered
//! videos, distilled into a few-step block-causal generator with distribution
//! matching, and served chunk by chunk with a KV cache.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used by the pipeline (`f32`) and by gradient checks (`f64`).

pub mod autograd;
mod container;
pub mod data;
pub mod dmd;
pub mod error;
pub mod eval;
pub mod model;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod schedule;
pub mod score;
pub mod stream;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Weights32 = model::ModelWeights<f32>;
pub type Weights64 = model::ModelWeights<f64>;
pub type KVCache32 = model::KVCache<f32>;
