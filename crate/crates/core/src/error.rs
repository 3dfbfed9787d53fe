use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("missing blob {path}")]
    MissingBlob { path: PathBuf },

    #[error("blob {path}: payload holds {actual} values, header declares {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: unsupported format version {found} (this build reads up to {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Conditioning(_) => ErrorClass::Numerical,
            Error::Layer { source, .. } => source.class(),
            _ => ErrorClass::Input,
        }
    }

    pub fn in_layer(self, layer: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
