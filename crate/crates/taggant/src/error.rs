use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code table.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by op `{0}`")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("detection infrastructure failure: {0}")]
    Detection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error class.
    /// 0 ok, 2 config, 3 data integrity, 4 numerical, 5 detection infrastructure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Integrity(_) => 3,
            Error::Shape(_) | Error::NonFinite(_) | Error::Numerical(_) => 4,
            Error::Detection(_) => 5,
            Error::Io(_) | Error::Json(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
