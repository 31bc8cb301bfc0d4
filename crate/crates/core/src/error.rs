use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("index {index} out of range for {len} entries")]
    OutOfRange { index: usize, len: usize },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("frozen parameter `{0}` received a gradient")]
    FrozenGradient(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
