//! Error classes shared by the whole crate.
//!
//! The variants map one-to-one onto the CLI exit codes: input/usage errors,
//! environment (I/O) failures, numeric training failures, and malformed
//! persisted artifacts.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us something inconsistent: bad shapes, out-of-range
    /// tokens, malformed manifest lines, unknown config keys.
    #[error("input error: {0}")]
    Input(String),

    /// Numeric failure during training or inference: non-finite gradients,
    /// diverging loss.
    #[error("training error: {0}")]
    Training(String),

    /// A persisted artifact (checkpoint) is corrupt or truncated.
    #[error("format error: {0}")]
    Format(String),

    /// The surrounding system failed us: file I/O, unwritable directories.
    #[error("environment error: {0}")]
    Environment(String),

    /// A bug on our side: internal invariants violated.
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Environment(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
