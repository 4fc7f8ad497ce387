use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: inputs recorded on different tapes")]
    TapeMismatch { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("network spec: {0}")]
    Spec(String),

    #[error("missing parameter or gradient `{0}`")]
    MissingKey(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("malformed input at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
