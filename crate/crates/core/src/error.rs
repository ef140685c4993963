use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AsitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AsitError {
    #[error("audio decode error: {0}")]
    Decode(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("input too short: {what} has {got}, needs at least {need}")]
    TooShort {
        what: &'static str,
        got: usize,
        need: usize,
    },

    #[error("configuration error on `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric fault in {site}: {detail}")]
    NumericFault { site: String, detail: String },

    #[error("state corruption: {0}")]
    Corruption(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AsitError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        AsitError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsitError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 2 configuration, 3 data,
    /// 4 numeric fault, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AsitError::Config { .. } | AsitError::Argument(_) => 2,
            AsitError::Decode(_)
            | AsitError::EmptyInput(_)
            | AsitError::TooShort { .. }
            | AsitError::DegenerateSplit(_)
            | AsitError::Load(_)
            | AsitError::Corruption(_)
            | AsitError::Data(_)
            | AsitError::Io { .. } => 3,
            AsitError::NumericFault { .. } => 4,
        }
    }
}
