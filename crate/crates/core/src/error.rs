use thiserror::Error;

/// Failure categories. Each maps onto a CLI exit code.
#[derive(Debug, Error)]
pub enum BaconError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BaconError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BaconError::Config(_) => 2,
            BaconError::Data(_) | BaconError::Io { .. } => 3,
            BaconError::Numeric(_) => 4,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BaconError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, BaconError>;
