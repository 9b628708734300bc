use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A filter denominator came close enough to zero that the response
    /// evaluation is meaningless.
    #[error("numerical degeneracy at bin {bin}: |A(e^jw)| = {magnitude:e}")]
    Degenerate { bin: usize, magnitude: f64 },

    /// Recursive filtering produced a non-finite sample.
    #[error("filter became unstable at sample {index}")]
    Unstable { index: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    /// A document, manifest or configuration failed validation.
    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("non-finite gradient for parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::model::ModelState>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad caller input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Validation { .. } | Error::LengthMismatch { .. }
        )
    }
}
