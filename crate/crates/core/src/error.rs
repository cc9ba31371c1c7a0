//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// An argument violates a precondition (odd pooling size, k > p, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where the contract forbids it.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted because the loss diverged.
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    /// Filesystem failure, with the path that caused it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not what the format promises.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A file carries a format version this build does not understand.
    #[error("unsupported version {found} in {path} (supported: {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    /// Run configuration is unusable (unknown key, bad value, missing input).
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was invoked before its inputs exist.
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 1 for usage/config, 2 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
