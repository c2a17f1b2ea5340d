use std::path::PathBuf;

/// Errors raised by the adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: header declares {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("labels required but {0} has none")]
    MissingLabels(String),

    #[error("stale artifact {path}: fingerprint {found} does not match {expected} (use --force)")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::Validation(_) => "validation",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::MissingLabels(_) => "missing_labels",
            Error::StaleArtifact { .. } => "stale_artifact",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: usize, actual: usize) -> Self {
        Error::Shape { expected, actual }
    }
}
