use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt mask: {0}")]
    CorruptMask(String),
    #[error("attention context is empty")]
    EmptyContext,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("no segmentation token emitted within {max_len} tokens")]
    NoSeg { max_len: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("non-finite loss on sample `{sample_id}`")]
    NonFinite { sample_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
