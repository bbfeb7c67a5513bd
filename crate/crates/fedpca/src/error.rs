//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A factorization hit a (numerically) rank-deficient input.
    #[error("degenerate factorization: {0}")]
    Degenerate(String),

    /// A solver produced a non-finite value or an impossible step.
    #[error("divergence at round {round}: {message}")]
    Divergence { round: usize, message: String },

    /// Invalid configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data, with the offending line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Artifacts that cannot be combined (e.g. feature-manifest mismatch).
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// A malformed binary or structured-text file.
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    /// A verification run found a counterexample.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 validation, 2 runtime, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Incompatible(_)
            | Error::Format { .. } => 1,
            Error::Degenerate(_) | Error::Divergence { .. } | Error::Io(_) => 2,
            Error::CheckFailed(_) => 3,
        }
    }
}
