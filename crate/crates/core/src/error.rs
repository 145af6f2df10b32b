use std::path::PathBuf;

use apd_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("sample generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("checkpoint parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at iteration {iteration} (batch: {})", batch.join(", "))]
    NonFiniteLoss { iteration: u64, batch: Vec<String> },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ApdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ApdError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ApdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a usage or configuration problem rather than a runtime fault.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ApdError::InvalidInput(_) | ApdError::Config(_) | ApdError::ParamShape { .. }
        )
    }
}

pub type Result<T, E = ApdError> = std::result::Result<T, E>;
