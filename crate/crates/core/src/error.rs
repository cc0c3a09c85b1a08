use thiserror::Error;

/// Errors raised anywhere in the fusion stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("degenerate normalization: row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("invalid condition attributes: {0}")]
    InvalidAttributes(String),
    #[error("corrupt file at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
