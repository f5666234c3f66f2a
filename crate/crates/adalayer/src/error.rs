//! Crate-wide error type.
//!
//! Every validation failure names the offending field or tensor so CLI
//! messages stay actionable without a stack trace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A config field or CLI argument is out of its documented domain.
    #[error("invalid value for `{field}`: {reason}")]
    InvalidArgument { field: String, reason: String },

    /// A tensor or scalar left the finite range.
    #[error("non-finite value in {context}{}", fmt_index(.index))]
    NonFinite {
        context: String,
        index: Option<usize>,
    },

    /// Two shapes that must agree do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// An artifact file does not match its schema.
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: String, reason: String },

    /// Training aborted because the loss left the finite range.
    /// Carries the step index; the caller still holds the last good model.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at coordinate {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            index: None,
        }
    }

    pub fn non_finite_at(context: impl Into<String>, index: usize) -> Self {
        Error::NonFinite {
            context: context.into(),
            index: Some(index),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
