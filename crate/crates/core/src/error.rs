use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DolfinError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DolfinError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DolfinError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DolfinError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by input files rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            DolfinError::Parse { .. }
                | DolfinError::Io { .. }
                | DolfinError::Checkpoint(_)
                | DolfinError::Mismatch(_)
                | DolfinError::Json(_)
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, DolfinError::Diverged { .. } | DolfinError::NonFinite(_))
    }
}
