//! Error type shared across the solver.

use std::fmt;

/// Errors produced by mesh construction, weight generation, linear solves and
/// experiment drivers.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverError {
    /// A precondition on the inputs was violated.
    InvalidArgument(String),
    /// An iterative or direct numerical procedure failed to produce a usable
    /// result (non-convergence, singular local system, ...).
    NumericalFailure(String),
    /// A runtime diagnostic (weight monotonicity, coercivity, ...) detected a
    /// violation of a property the scheme relies on.
    DiagnosticFailure {
        level: usize,
        index: usize,
        message: String,
    },
    /// Invalid run configuration (unknown key, inadmissible degrees, ...).
    Config(String),
    /// File I/O failure while writing CSV artifacts.
    Io(String),
}

impl fmt::Display for SolverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Self::NumericalFailure(msg) => write!(f, "numerical failure: {msg}"),
            Self::DiagnosticFailure {
                level,
                index,
                message,
            } => write!(f, "diagnostic failure at (m={level}, i={index}): {message}"),
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for SolverError {}

impl From<std::io::Error> for SolverError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;
