//! Token-aware contrastive continual pre-training for small BERT-style
//! encoders, together with token-representation anisotropy diagnostics.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below pick the
//! two precisions used in practice: `f32` for training and `f64` for
//! gradient verification and oracles.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Mode, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
