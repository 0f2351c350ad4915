use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("size mismatch in {what}: expected {expected}, found {found}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("sample `{sample}` failed at stage `{stage}`: {source}")]
    Stage {
        sample: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn at_stage(self, sample: &str, stage: &'static str) -> Self {
        Error::Stage {
            sample: sample.to_string(),
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (files, arguments, configs)
    /// rather than failures while running a computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Format { .. }
            | Error::SizeMismatch { .. }
            | Error::Invalid(_)
            | Error::Config { .. }
            | Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Csv { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            Error::Io { .. } | Error::NonFinite { .. } | Error::Image { .. } => false,
        }
    }
}
