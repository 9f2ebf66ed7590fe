use std::path::PathBuf;

use thiserror::Error;

use crate::rle::RleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shape and argument errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: zero-sized dimension in shape {shape:?}")]
    ZeroSizedDim { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("{op}: odd spatial size {height}x{width}; pad the input to an even size first")]
    OddSpatial {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image format error in {path}: {msg}")]
    ImageFormat { path: PathBuf, msg: String },
    #[error("weight file error: {0}")]
    Weights(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
