use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {what} (residual {residual:.3e})")]
    Numerical { what: String, residual: f64 },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training failed at batch {batch}: {what}")]
    Train { what: String, batch: usize },

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: truncated file ({0})")]
    Truncated(String),

    #[error("checkpoint: manifest/payload mismatch: {0}")]
    ManifestMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {pos}: {what}")]
    Parse { what: String, pos: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 for argument/config problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::UnknownArch(_) => 2,
            _ => 1,
        }
    }
}
