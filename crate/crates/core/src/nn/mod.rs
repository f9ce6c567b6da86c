//! Small layer library over candle tensors: a named parameter store with
//! seeded initialization, im2col convolutions, batch normalization and the
//! elementwise and resampling ops the networks need.

pub mod fused;
mod layers;
pub mod ops;
mod store;

pub use layers::{BatchNorm, Conv2d, ConvSpec, Linear};
pub use store::{Init, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter or buffer {0:?}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Batch-norm behaviour for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}
