//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod norm;
mod resize;
mod shape;

pub use conv::{conv2d_forward, Conv2dOptions};
pub use norm::{BatchNormOutput, BatchNormStats, NormMode};
pub use resize::resize_bilinear_forward;
