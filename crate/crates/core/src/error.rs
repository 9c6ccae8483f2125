use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied data violating an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A run configuration is inconsistent or incomplete.
    #[error("invalid config: {0}")]
    Config(String),

    /// A data file or manifest is missing, truncated or malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Wav(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
