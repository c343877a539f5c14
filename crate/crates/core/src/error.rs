use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("numeric fault at {stage} {index}: {message}")]
    Numeric {
        stage: &'static str,
        index: usize,
        message: String,
    },

    #[error("phase violation: `{operation}` requires phase {required}, session is at {actual}")]
    Phase {
        operation: &'static str,
        required: String,
        actual: String,
    },

    #[error("unknown view id {0}")]
    UnknownView(u32),

    #[error("session at {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn numeric(stage: &'static str, index: usize, message: impl Into<String>) -> Self {
        Error::Numeric {
            stage,
            index,
            message: message.into(),
        }
    }
}

/// Decode a JSON document, reporting the path of the offending field on failure.
pub(crate) fn from_json<T: serde::de::DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::parse(context, format!("field `{}`: {}", path, e.inner()))
    })
}
