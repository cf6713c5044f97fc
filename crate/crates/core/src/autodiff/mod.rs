//! Reverse-mode building blocks for the refinement network.
//!
//! Operators are plain functions with explicit backward passes; the network
//! module records the forward trace and replays it in reverse.

pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, BranchPattern, GradCheckConfig, GradCheckReport, Probe};
pub use loss::{joint_loss, linf_loss, mse_loss, truncated_l2_loss, Loss, DEFAULT_LAMBDA};
pub use ops::{
    add, conv2d, conv2d_backward, relu, relu_backward, truncate, truncate_backward,
    upsample_nearest2x, upsample_nearest2x_backward, ConvGrads, ConvParams, TruncationBounds,
};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
    #[error("truncation bounds have lo > hi")]
    InvalidBounds,
    #[error("l-infinity loss log argument {0} below guard")]
    LogDomain(f64),
}
