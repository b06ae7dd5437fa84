use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing path: {0}")]
    MissingPath(PathBuf),

    #[error("cannot decode image {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },

    #[error("zero images found in {0}")]
    NoImages(PathBuf),

    #[error("bad magic in tensor container")]
    BadMagic,

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite score for sample {index}")]
    NonFiniteScore { index: usize },

    #[error("zero feature vector at level {level}, sample {sample}, position ({row}, {col})")]
    ZeroFeature {
        level: usize,
        sample: usize,
        row: usize,
        col: usize,
    },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("singular covariance after shrinkage")]
    SingularCovariance,

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
