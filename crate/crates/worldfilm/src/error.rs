use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceLength { got: usize, max: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("state error: {0}")]
    State(String),

    #[error("stage-order error: {0}")]
    StageOrder(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Vocabulary(_) => 2,
            Error::StageOrder(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
