use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A precondition on an argument or configuration value was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative numerical routine hit its iteration cap.
    #[error("{routine} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        routine: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// Every singular value fell below the retention threshold.
    #[error("degenerate basis: no singular value above {threshold:e}")]
    DegenerateBasis { threshold: f64 },

    /// A linear system was singular or numerically rank deficient.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// Adaptation state was used out of order (stale or missing cache).
    #[error("stale or missing cache: {0}")]
    StaleCache(&'static str),

    /// Configuration file did not validate.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint or data file was malformed.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical kernels (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::DegenerateBasis { .. } | Error::RankDeficient(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
