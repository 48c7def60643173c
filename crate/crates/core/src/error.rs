//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes. Always names both sides.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, class label, position) outside its valid range.
    #[error("{what} {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error in {op}: {message}")]
    Numeric { op: &'static str, message: String },

    /// A caller broke an API precondition.
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },

    /// Invalid configuration value; `field` names the offending key.
    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Training aborted because the loss or a gradient went non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed input data (TSV rows, checkpoint bytes, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(op: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            op,
            message: message.into(),
        }
    }

    pub fn numeric(op: &'static str, message: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
