use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is unusable. `path` is the dotted field path.
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("trace load failed: {0}")]
    TraceLoad(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("uncertainty oracle failed at fractions {fractions:?}: {message}")]
    Oracle { fractions: Vec<f64>, message: String },

    /// An internal simulator invariant broke. Never caused by user input alone.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI contract: 3 for invariant violations, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}
