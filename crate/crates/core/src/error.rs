use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum EmcError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite log-likelihood for frame {frame} at rotation {rotation}")]
    NonFiniteLikelihood { frame: usize, rotation: usize },

    #[error("no rotation explains frame {frame} (all likelihoods vanished)")]
    DegenerateFrame { frame: usize },

    #[error("slice sum is zero for rotation {rotation}; cannot estimate fluence")]
    EmptySlice { rotation: usize },

    #[error("missing dataset variant: {0}")]
    MissingVariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EmcError>;

impl EmcError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EmcError::Io {
            path: path.into(),
            source,
        }
    }
}
