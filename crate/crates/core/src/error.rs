use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FslError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FslError {
    /// Shapes or hyper-parameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {message} (residual {residual:e})")]
    Numeric { message: String, residual: f64 },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    ConfigSyntax {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A broken internal invariant; indicates a bug rather than bad input.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl FslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FslError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from configuration (exit code 1) rather than
    /// from a failure while running (exit code 2).
    pub fn is_config_error(&self) -> bool {
        matches!(self, FslError::Config(_) | FslError::ConfigSyntax { .. })
    }
}
