//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the compression library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (bad rank, dimension mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// SVD iteration failed to converge.
    #[error("svd did not converge for {role} ({rows}x{cols})")]
    SvdNonConvergence {
        role: String,
        rows: usize,
        cols: usize,
    },

    /// Symmetric eigendecomposition failed; there is no further fallback.
    #[error("eigendecomposition failed for {role} ({order}x{order})")]
    EigenFailure { role: String, order: usize },

    /// A triangular or whitening factor is numerically singular.
    #[error("numerically singular factor: {0}; consider a larger jitter schedule")]
    SingularFactor(String),

    /// Invalid configuration value or schema violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed container file.
    #[error("format error: {0}")]
    Format(String),

    /// Declared section lengths exceed the file size.
    #[error("truncated file: need {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    /// A computed quantity became non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for config/validation, 1 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Truncated { .. } => 2,
            Error::SvdNonConvergence { .. }
            | Error::EigenFailure { .. }
            | Error::SingularFactor(_)
            | Error::NonFinite(_)
            | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
