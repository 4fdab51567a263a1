use thiserror::Error;

use crate::train::TrainingLog;

pub type Result<T, E = DmoeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DmoeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("target {value} outside range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("recalibration error: {0}")]
    Recalibration(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence {
        epoch: usize,
        partial_log: Box<TrainingLog>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DmoeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DmoeError::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        DmoeError::Parse {
            line,
            message: msg.into(),
        }
    }
}
