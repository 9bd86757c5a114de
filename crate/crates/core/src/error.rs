use std::path::PathBuf;

/// Errors produced anywhere in the codec pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Bitstream or checkpoint content that cannot be trusted.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's data (files, streams, configs)
    /// rather than by an internal failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::Corrupt(_)
                | Error::Data(_)
                | Error::Io { .. }
                | Error::Wav(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
