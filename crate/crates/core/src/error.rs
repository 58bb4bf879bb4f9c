// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    /// Bad magic, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// The file ends (or an index entry points) before a structure is complete.
    #[error("corrupt file at byte {offset}: {reason}")]
    Corruption { offset: u64, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    /// Vector or matrix dimensions disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value violates a record or dataset invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inputs are well-formed but unusable (empty sets, out-of-range labels, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate}): {reason}")]
    Divergence {
        epoch: usize,
        learning_rate: f64,
        reason: String,
    },

    #[error("balance error: class {class} has no groups")]
    Balance { class: usize },

    #[error("split error: {0}")]
    Split(String),

    /// Source and target of a transfer evaluation disagree on model or task.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
