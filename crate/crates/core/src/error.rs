//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. The variants
//! are grouped so that a front end can map them onto process exit codes:
//! configuration problems, missing inputs and incompatible checkpoints are
//! distinguishable from internal failures.

use thiserror::Error;

/// Unified error type for the core crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation was applied to incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration field has an invalid value. `field` names the
    /// offending entry so the message is actionable without a stack trace.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// A required input file or directory does not exist.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// A checkpoint does not match the model being constructed
    /// (missing parameter, wrong shape, unknown format version).
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    /// A data file failed to parse; points at the exact line.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Semantically invalid data or arguments (empty batch, unknown
    /// category id, non-unit quaternion, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The optimizer saw a non-finite gradient; names the parameter.
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),

    /// Training stopped because the loss became non-finite.
    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A bug: an invariant the code itself is supposed to maintain broke.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
