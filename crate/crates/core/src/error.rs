use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("submaps {a} and {b} share no frames")]
    NoOverlap { a: usize, b: usize },

    #[error("submaps {a} and {b} share frames but no pixel correspondences")]
    EmptyCorrespondence { a: usize, b: usize },

    #[error("alignment of submap {b} onto submap {a} failed: {source}")]
    PairFailure {
        a: usize,
        b: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("render output carries no contributor lists")]
    MissingForwardState,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("quaternion step collapsed to norm {norm:e}")]
    DegenerateStep { norm: f64 },

    #[error("invalid value for `{field}`: {message}")]
    Spec { field: String, message: String },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn spec(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for numerical or pipeline failures, false for input/usage problems.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateGeometry(_)
            | Error::NoOverlap { .. }
            | Error::EmptyCorrespondence { .. }
            | Error::BehindCamera { .. }
            | Error::MissingForwardState
            | Error::EmptyCloud
            | Error::DegenerateStep { .. } => true,
            Error::PairFailure { source, .. } | Error::Frame { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
