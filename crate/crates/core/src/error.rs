use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A caller broke a documented precondition (length mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("estimation failed (th_acc = {th_acc}): {reason}")]
    EstimationFailed { th_acc: f64, reason: String },

    #[error("non-finite gradient in parameter `{param}`")]
    NumericalFailure { param: String },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err($crate::error::Error::Contract(format!($($arg)+)));
            }
        }
    };
}
pub(crate) use ensure;
