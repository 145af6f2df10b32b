//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! A [`Tape`] records every operation of one forward pass; [`Var`] handles
//! refer to its nodes. Operations that need bespoke math can be recorded with
//! [`Tape::custom`] by supplying a value and a backward closure.

mod error;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{
    conv2d_forward, resize_bilinear_forward, BatchNormOutput, BatchNormStats, Conv2dOptions, NormMode,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamBinder, ParamId, ParamKind, ParamStore};
pub use scalar::{gemm, DType, Scalar};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
