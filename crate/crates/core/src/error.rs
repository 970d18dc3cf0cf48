use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor extent did not match what an operation expects.
    #[error("dimension error on axis `{axis}`: {detail}")]
    Dimension { axis: &'static str, detail: String },

    /// Inconsistent layer wiring, flags or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A file parsed but its content is unusable.
    #[error("format error at {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A dataset sample failed validation.
    #[error("invalid sample `{id}`: {detail}")]
    Sample { id: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
