use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("no contributing query points at any offset")]
    NoMatch,

    #[error("disparity must be positive, got {0}")]
    InvalidDisparity(f64),

    #[error("degenerate reprojection (homogeneous W = 0)")]
    DegenerateReprojection,

    #[error("point is behind the camera (Z = {0})")]
    BehindCamera(f64),

    #[error("box bottom at v = {v_bottom} does not intersect the ground (horizon at {horizon})")]
    NoGroundIntersection { v_bottom: f64, horizon: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("frame {frame}: {msg}")]
    Frame { frame: u64, msg: String },

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}
