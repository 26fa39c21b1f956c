//! Error types shared across the crate.

use thiserror::Error;

/// All failure modes of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes do not conform to an operation's shape rule.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinite values.
    #[error("numeric error in {context}: non-finite values produced")]
    Numeric { context: String },

    /// A row had (near-)zero Euclidean norm where normalization was required.
    /// Degenerate representations fail loudly instead of being clamped.
    #[error("zero-norm row {row} in {op} (norm {norm} < {eps})")]
    ZeroNorm {
        op: &'static str,
        row: usize,
        norm: f64,
        eps: f64,
    },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid input data (e.g. an image smaller than the minimum).
    #[error("invalid input: {0}")]
    Input(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Dataset-level problem (empty class directory, undecodable file, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed checkpoint file; `offset` is the byte position of the problem.
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Evaluation cannot be carried out (e.g. a class is absent).
    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
