use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/inf loss, divergence, or another numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed or semantically invalid input data.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream artifact {}: produce it with `fvlab {producer}`", path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// A copy for reporting one failure in several places. Wrapped library
    /// errors keep their message but not their source chain.
    pub(crate) fn replicate(&self) -> Self {
        match self {
            Error::Shape { op, detail } => Error::shape(op, detail.clone()),
            Error::Contract(m) => Error::Contract(m.clone()),
            Error::Numeric(m) => Error::Numeric(m.clone()),
            Error::Data(m) => Error::Data(m.clone()),
            Error::UnknownToken(t) => Error::UnknownToken(t.clone()),
            Error::Config(m) => Error::Config(m.clone()),
            Error::MissingArtifact { path, producer } => Error::MissingArtifact {
                path: path.clone(),
                producer: producer.clone(),
            },
            Error::Io { path, source } => Error::io(path, std::io::Error::new(source.kind(), source.to_string())),
            Error::Json(e) => Error::Data(e.to_string()),
            Error::Csv(e) => Error::Data(e.to_string()),
        }
    }
}
