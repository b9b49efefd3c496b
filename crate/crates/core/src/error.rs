use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("grid {rows}x{cols} does not divide image {height}x{width}: {detail}")]
    Divisibility {
        height: usize,
        width: usize,
        rows: usize,
        cols: usize,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("could not reach occlusion target {target:.4} within {attempts} attempts (best achieved {best:.4})")]
    TargetUnreachable {
        target: f64,
        best: f64,
        attempts: usize,
    },

    #[error("oracle transport failure at batch index {batch_index}: {message}")]
    Transport { batch_index: usize, message: String },

    #[error("oracle protocol error: {0}")]
    Protocol(String),

    #[error("oracle protocol version mismatch: expected {expected}, peer speaks {found}")]
    Version { expected: u32, found: u32 },

    #[error("oracle reported failure for request {id}: {message}")]
    Remote { id: u64, message: String },

    #[error("saliency estimation aborted after {completed} of {total} masks: {source}")]
    Aborted {
        completed: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport failures are worth retrying; everything else is deterministic.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
