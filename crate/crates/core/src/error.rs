use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a `.eqm` container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic: expected \"EQM1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("container truncated while reading {record}")]
    Truncated { record: String },
    #[error("length mismatch in {record}: declared {declared} bytes, expected {expected}")]
    LengthMismatch {
        record: String,
        declared: usize,
        expected: usize,
    },
    #[error("malformed header at line {line}: {message}")]
    Header { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("unsupported pattern: {0}")]
    UnsupportedPattern(String),

    #[error("calibration stats required: {0}")]
    CalibrationRequired(String),

    #[error("calibration incomplete: no range recorded for tensor `{tensor}`")]
    CalibrationIncomplete { tensor: String },

    #[error("no model meets F1 floor {floor}; best near-miss is `{best_id}` with F1 {best_f1}")]
    NoFeasibleModel {
        floor: f32,
        best_id: String,
        best_f1: f32,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f32 },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            context: context.to_string(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
