//! Universally slimmable networks at desk scale.
//!
//! One set of weights runs at any width in `[lower_bound, 1.0]` by using the
//! first `k` channels of every slimmable layer. The crate covers the tensor
//! and autodiff core, width resolution and sampling, slimmable layers with
//! per-width batch-norm statistics, sandwich-rule training with inplace
//! distillation, post-training BN calibration, multiply-add counting, and
//! dataset/checkpoint I/O.
//!
//! "FLOPs" throughout means multiply-adds.

pub mod arch;
pub mod calibrate;
pub mod data;
pub mod flops;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod width;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("width: {0}")]
    Width(String),
    #[error("config: {0}")]
    Config(String),
    #[error("layer `{layer}`: expected {expected} input channels, got {got}")]
    ChannelMismatch { layer: String, expected: usize, got: usize },
    #[error("layer `{layer}` has no batch-norm statistics for width {width}; run calibration first")]
    MissingStats { layer: String, width: usize },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error("{path}: {msg} (at {position})")]
    Format {
        path: String,
        position: String,
        msg: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use arch::ArchSpec;
pub use nn::SlimmableNet;
pub use width::{WidthConfig, WidthSample};
