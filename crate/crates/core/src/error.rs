use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension error in {layer}: {msg}")]
    Dimension { layer: String, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("stage `{stage}` failed ({}): {source}", path.display())]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Dimension {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Domain(_) | Error::Format { .. } | Error::Dataset(_) | Error::Io(_) => 3,
            Error::Dimension { .. }
            | Error::Numeric(_)
            | Error::Checkpoint(_)
            | Error::Training(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
