use thiserror::Error;

use crate::checkpoint::Archive;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss. `last_good` holds the parameters
    /// from the last epoch that finished with a finite loss.
    #[error("training diverged in {stage} at epoch {epoch}")]
    Diverged {
        stage: String,
        epoch: usize,
        last_good: Box<Archive>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
