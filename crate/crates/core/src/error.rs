use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric overflow at unit {unit}, node {node}: exponent {exponent}")]
    NumericOverflow { unit: usize, node: usize, exponent: f64 },

    #[error("objective failed at iteration {iteration}: {cause}")]
    NonFiniteObjective { iteration: usize, cause: String, trace: Vec<f64> },

    #[error("numeric underflow: {0}")]
    NumericUnderflow(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("interaction generation failed after {attempts} attempts (best kappa {best_kappa})")]
    GenerationFailure { attempts: usize, best_kappa: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow { .. }
                | Error::NonFiniteObjective { .. }
                | Error::NumericUnderflow(_)
                | Error::GenerationFailure { .. }
        )
    }
}
