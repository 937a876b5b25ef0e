use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (batch ids: {ids})")]
    NonFiniteLoss { step: usize, ids: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
