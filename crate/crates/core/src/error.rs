use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension violation. The message names the op and the
    /// offending dimension so failures are diagnosable from the text alone.
    #[error("{op}: {what}")]
    Shape { op: &'static str, what: String },

    /// Bad scalar argument (stride 0, negative eps, ...).
    #[error("{op}: {what}")]
    InvalidArg { op: &'static str, what: String },

    /// Configuration rejected at validation time.
    #[error("config: {0}")]
    Config(String),

    /// Autodiff misuse: non-scalar loss, gradient of an untracked node, ...
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// A checked computation produced a non-finite value.
    #[error("{op}: non-finite value encountered ({what})")]
    NonFinite { op: &'static str, what: String },

    /// Checkpoint/container problems: version, missing entries, shape drift.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset/eval input problems (unmatched pairs, bad masks, ...).
    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, what: impl Into<String>) -> Self {
        Error::Shape { op, what: what.into() }
    }

    pub fn invalid(op: &'static str, what: impl Into<String>) -> Self {
        Error::InvalidArg { op, what: what.into() }
    }
}
