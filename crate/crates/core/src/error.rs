use regimenas_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// Input data failed validation (malformed CSV, broken OHLC invariants, too short).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("architecture rejected: {0}")]
    Arch(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("surrogate error: {0}")]
    Surrogate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_data_error(&self) -> bool {
        matches!(self, CoreError::Data(_))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
