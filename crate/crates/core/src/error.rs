use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AirError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] air_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("encoder spec hash mismatch: checkpoint has {found}, expected {expected}")]
    SpecMismatch { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("clustering degenerate: {0}")]
    Clustering(String),
}

pub type Result<T> = std::result::Result<T, AirError>;

pub(crate) fn precondition(msg: impl Into<String>) -> AirError {
    AirError::Precondition(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AirError {
    let path = path.into();
    move |source| AirError::Io { path, source }
}
