use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e}")]
    GradCheck { max_rel_error: f64, tolerance: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("no gradient recorded for this tensor (detached or unused)")]
    AbsentGradient,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("feature map {path}: {kind}")]
    FeatureMap { path: PathBuf, kind: FeatureMapError },

    #[error("invalid sample `{id}`: {msg}")]
    Validation { id: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (batch ids {batch_ids:?}): {source}")]
    Diverged {
        step: u64,
        batch_ids: Vec<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeatureMapError {
    #[error("bad magic {0:?}, expected \"MFM1\"")]
    BadMagic([u8; 4]),
    #[error("extents {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    WrongExtents {
        rows: u32,
        cols: u32,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("truncated payload: {got} bytes, expected {expected}")]
    Truncated { got: usize, expected: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True when the failure is numeric (NaN/Inf or divergence) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. } | Error::GradCheck { .. })
    }
}
