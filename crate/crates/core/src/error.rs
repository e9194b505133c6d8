use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss {value} at step {step} ({stage})")]
    NonFinite {
        stage: &'static str,
        step: usize,
        value: f64,
    },
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TraceError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TraceError {
    TraceError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
