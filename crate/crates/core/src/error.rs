use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {context}: {message}")]
    Format { context: String, message: String },

    #[error("numerical stats error: {0}")]
    Numerical(String),

    #[error("feature extractor `{name}` failed: {message}")]
    Extractor { name: String, message: String },

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}

pub(crate) fn check_len(field: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            field,
            expected,
            got,
        })
    }
}
