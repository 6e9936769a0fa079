use regimenas_core::error::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Carries a CLI failure through a core callback.
    pub fn into_core(self) -> CoreError {
        match self {
            CliError::Core(e) => e,
            CliError::Io { path, source } => CoreError::Io { path, source },
            CliError::Data(m) => CoreError::Data(m),
            other => CoreError::Config(other.to_string()),
        }
    }

    /// 2 for input-data validation failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Core(e) if e.is_data_error() => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
