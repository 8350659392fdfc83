//! Crate-wide error type. Every fallible operation returns [`Result`].

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not compose; the message names the offending dimension.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is out of its documented domain (rank < 2, tau <= 0, ...).
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// A checkpoint file is malformed; byte positions are included when known.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A run configuration failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
