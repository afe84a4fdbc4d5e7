//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the adaptation engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a dimensional contract (vector/matrix shape mismatch).
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An input carried a NaN or infinite coordinate.
    #[error("rejected non-finite input in {context}")]
    NonFiniteInput { context: &'static str },

    /// A responsibility row failed its distribution invariant.
    #[error("rejected batch: {reason}")]
    RejectedBatch { reason: String },

    /// A sample cannot be processed (e.g. a zero-norm feature that cannot be normalized).
    #[error("rejected sample {index}: {reason}")]
    RejectedSample { index: usize, reason: &'static str },

    /// Covariance factorization failed even after repeated shrinkage retries.
    #[error("numerical degeneracy for class {class_index}: {details}")]
    NumericalDegeneracy {
        class_index: usize,
        details: String,
    },

    /// A loss or gradient evaluated to NaN/inf; the run must abort.
    #[error("non-finite value produced by {what}")]
    NonFinite { what: String },

    /// Configuration is invalid (bad value, unknown key, missing field).
    #[error("invalid configuration: {message}")]
    Config { message: String },

    /// A scenario field failed validation.
    #[error("invalid scenario field {field}: {message}")]
    Validation { field: String, message: String },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A binary or JSON artifact could not be parsed.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 io/parse, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Validation { .. } => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::DimensionMismatch { .. }
            | Error::NonFiniteInput { .. }
            | Error::RejectedBatch { .. }
            | Error::RejectedSample { .. }
            | Error::NumericalDegeneracy { .. }
            | Error::NonFinite { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
