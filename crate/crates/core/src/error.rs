use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input at component {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range 1..={max} for {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        max: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("noise block shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("not enough finite records to fit an order: {finite} finite, need at least 2")]
    InsufficientRecords { finite: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "non_finite",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InsufficientRecords { .. } => "insufficient_records",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
