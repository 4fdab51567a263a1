use dmoe_core::DmoeError;
use thiserror::Error;

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {message}")]
    InvalidValue {
        key: String,
        value: String,
        message: String,
    },

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Core(#[from] DmoeError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub(crate) fn value(key: &str, value: &str, message: impl Into<String>) -> Self {
        ExperimentError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            message: message.into(),
        }
    }
}
