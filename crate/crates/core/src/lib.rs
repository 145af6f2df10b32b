//! Bitemporal change detection with graph-based feature alignment,
//! perturbation-trained difference masks and decoupled dual decoders.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod decoders;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perturbation;
pub mod train;
pub mod viz;

pub use error::{ApdError, Result};
