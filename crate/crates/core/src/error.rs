//! Error taxonomy shared by all modules.
//!
//! The CLI maps each variant to a distinct exit code, so variants are kept
//! coarse and stable.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file. Carries the 1-based line number when known.
    #[error("parse error (line {line}): {msg}")]
    Parse { line: usize, msg: String },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Data admits no test (e.g. zero pooled variance).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Layout the implemented theory does not cover (e.g. unbalanced
    /// Banach-space samples).
    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    /// The empirical beta fit failed; callers fall back to the raw bound.
    #[error("calibration failure: {0}")]
    CalibrationFailure(String),

    /// Numerical breakdown (non-convergence, overflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A combinatorial guard rail was exceeded.
    #[error("size error: {0}")]
    Size(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateData(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::UnsupportedDesign(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
