use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or incompatible tensor shapes.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate batch statistics in {layer}: {count} value(s) per channel, need at least 2")]
    DegenerateStatistics { layer: String, count: usize },

    #[error("non-finite value in {name} at step {step}")]
    NonFinite { name: String, step: u64 },

    #[error("cloud coverage target {target:.3} unreachable, achieved {achieved:.3}")]
    Coverage { target: f64, achieved: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used by the command-line front end for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape { .. } => ErrorClass::Config,
            Error::DegenerateStatistics { .. } | Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Coverage { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Image { .. }
            | Error::Io { .. } => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
