// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// API misuse, e.g. differentiating a node that is not on the tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite value or an unusable denominator.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration (model, rules, task, training or method).
    #[error("config error: {0}")]
    Config(String),

    /// Token id outside the model vocabulary.
    #[error("token id {token} out of vocabulary (size {vocab})")]
    Vocabulary { token: usize, vocab: usize },

    /// Malformed or truncated on-disk data.
    #[error("format error: {0}")]
    Format(String),

    /// A caller-side contract was violated (lengths, grids, empty inputs).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training diverged.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
