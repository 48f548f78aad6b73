use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing frame index {index} (pattern {pattern})")]
    MissingFrame { pattern: String, index: usize },

    #[error("no frames match pattern {0}")]
    NoFrames(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("SOR did not converge after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("no common slices between trajectories")]
    NoCommonSlices,

    #[error("mover {mover} leaves the domain at slice {theta}")]
    OutOfDomain { mover: usize, theta: usize },

    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
