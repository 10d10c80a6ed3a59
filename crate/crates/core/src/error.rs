use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Axis lengths or ranks that do not line up.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN/inf where a finite value was required.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("geometric domain error: {0}")]
    Geometry(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid scene spec: {0}")]
    Scene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Prefix the context of a numeric/shape error, e.g. with a layer index.
    pub fn in_context(self, prefix: &str) -> Self {
        match self {
            Error::Numeric { context, detail } => Error::Numeric {
                context: format!("{prefix}: {context}"),
                detail,
            },
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("{prefix}: {detail}"),
            },
            other => other,
        }
    }
}
