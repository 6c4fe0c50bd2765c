//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit codes: configuration problems exit with 1,
//! numerical failures with 2 and statistical-test failures (under `--strict`)
//! with 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: unknown names, bad parameter counts, out-of-range
    /// settings, malformed config files.
    #[error("config: {0}")]
    Config(String),

    /// A numerical procedure failed: quadrature did not converge, an
    /// eigensolve stalled, a gradient turned non-finite, an ensemble died.
    #[error("numerics: {0}")]
    Numerics(String),

    /// A statistical check failed or an estimator is unusable
    /// (effective sample size too small, too few events, undersampling).
    #[error("statistics: {0}")]
    Statistics(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }

    pub fn statistics(msg: impl Into<String>) -> Self {
        Error::Statistics(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerics(_) => 2,
            Error::Statistics(_) => 3,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
