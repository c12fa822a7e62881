use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("record `{id}`: {msg}")]
    Record { id: String, msg: String },

    #[error("dataset {}: {msg}", path.display())]
    Dataset { path: PathBuf, msg: String },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Record {
            id: id.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad or missing input data rather than by a
    /// failure while computing.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidLabel(_)
                | Error::Record { .. }
                | Error::Dataset { .. }
                | Error::Checkpoint { .. }
                | Error::ParamMismatch(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
        )
    }

    pub fn is_usage_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::UnknownTask(_))
    }
}
