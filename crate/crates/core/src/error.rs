use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported-shape: {0}")]
    UnsupportedShape(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("degenerate field: {0}")]
    DegenerateField(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("length error: sequence of {len} tokens exceeds context length {max}")]
    Length { len: usize, max: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step}: focal={focal}, dice={dice}")]
    NonFiniteLoss { step: usize, focal: f64, dice: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
