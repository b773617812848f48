use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding request for user {user_id} failed: {reason}")]
    Embedding { user_id: usize, reason: String },

    #[error("corrupt cache {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },

    #[error("no prior for group {0}")]
    MissingPrior(String),

    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("{0} (pass --allow-config-mismatch to proceed)")]
    ConfigMismatch(String),

    #[error("malformed record in {path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("unknown mode `{0}`")]
    UnknownMode(String),

    #[error("{0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Embedding { .. } => "embedding",
            Error::CacheCorrupt { .. } => "cache_corrupt",
            Error::MissingPrior(_) => "missing_prior",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Parse { .. } => "parse",
            Error::UnknownMode(_) => "unknown_mode",
            Error::Degenerate(_) => "degenerate",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.into(),
        }
    }
}
