use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto one of the CLI exit-code classes via [`ShmError::exit_code`].
#[derive(Debug, Error)]
pub enum ShmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch} (loss {loss:e})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("insufficient modes: matched {matched} of {required}")]
    InsufficientModes { matched: usize, required: usize },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("unsupported format_version {0} (expected 1)")]
    UnsupportedVersion(i64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ShmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ShmError::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        ShmError::Numerical(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ShmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for bad input or data, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ShmError::Numerical(_)
            | ShmError::TrainingDiverged { .. }
            | ShmError::InsufficientModes { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, ShmError>;
