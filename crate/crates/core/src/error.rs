use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate region ({x1}, {y1}, {x2}, {y2}): requires x1 < x2 and y1 < y2")]
    DegenerateRegion { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid overlap bounds [{lower}, {upper}]: requires 0 <= l <= u <= 1")]
    InvalidBounds { lower: f64, upper: f64 },

    #[error("region ({x1}, {y1}, {x2}, {y2}) lies outside the {width}x{height} image")]
    RegionOutsideImage {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward called before a scalar loss was recorded")]
    NoForward,

    #[error("non-finite loss at example {example} (image {image}, primary {region})")]
    NonFiniteLoss {
        example: usize,
        image: String,
        region: String,
    },

    #[error("no proposals")]
    NoProposals,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("average precision undefined: no positive examples")]
    ApUndefined,

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("{path}: truncated: {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: checksum mismatch (stored {stored}, computed {computed})")]
    Checksum {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("{path}: bad magic header")]
    BadMagic { path: PathBuf },

    #[error("placement infeasible: {0}")]
    Placement(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io { path: path.into(), err }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
