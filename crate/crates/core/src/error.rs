use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field is outside its documented range.
    #[error("invalid configuration: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("filter design failed: {0}")]
    Design(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("split failed: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// Input data is malformed or insufficient (bad CSV, single class, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint does not match the configuration it is loaded against.
    #[error("model/config mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
