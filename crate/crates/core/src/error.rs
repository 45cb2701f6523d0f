use thiserror::Error;

/// Errors raised across the registration pipeline.
#[derive(Debug, Error)]
pub enum FmirError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty label {0}")]
    EmptyLabel(i32),
    #[error("format error: {0}")]
    Format(String),
    #[error("size mismatch: header declares {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FmirError>;

impl FmirError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FmirError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
