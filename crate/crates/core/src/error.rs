use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown sample `{0}`")]
    UnknownSample(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt raster {}: {reason}", path.display())]
    CorruptRaster { path: PathBuf, reason: String },

    #[error("invalid scribble label {value} at ({row}, {col})")]
    InvalidScribbleLabel { value: u8, row: usize, col: usize },

    #[error("invalid scribble raster: {0}")]
    InvalidScribbleFormat(String),

    #[error("size mismatch: {what} is {actual:?}, expected {expected:?}")]
    SizeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("empty supervision: no labeled scribble pixels")]
    EmptySupervision,

    #[error("empty validity mask: the two views do not overlap")]
    EmptyOverlap,

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch: {})", ids.join(", "))]
    NonFiniteLoss { step: usize, ids: Vec<String> },

    #[error("prediction/ground-truth id mismatch: missing predictions {missing_pred:?}, missing ground truth {missing_gt:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_gt: Vec<String>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
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

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownSample(_)
                | Error::MissingFile(_)
                | Error::CorruptRaster { .. }
                | Error::InvalidScribbleLabel { .. }
                | Error::InvalidScribbleFormat(_)
                | Error::SizeMismatch { .. }
                | Error::EmptySupervision
                | Error::InvalidImage(_)
                | Error::InvalidConfig(_)
                | Error::IdMismatch { .. }
        )
    }
}
