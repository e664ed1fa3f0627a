use std::path::PathBuf;

use mupad_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MupadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("condition set: {0}")]
    Condition(String),

    #[error("config: {0}")]
    Config(String),

    #[error("solver produced a non-finite state at step {step}")]
    Diverged { step: usize },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("{0}")]
    Invalid(String),

    /// A statistic with no defined value on the given input (e.g. correlation of a constant).
    #[error("undefined: {0}")]
    Undefined(String),
}

impl MupadError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MupadError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = MupadError> = std::result::Result<T, E>;
