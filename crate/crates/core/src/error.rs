use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GwqError>;

/// Errors raised anywhere in the quantization pipeline.
///
/// Variants are grouped by category so the CLI can map them onto its exit
/// code contract (see [`GwqError::category`]).
#[derive(Debug, Error)]
pub enum GwqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("tensor `{tensor}`: {detail}")]
    Parse { tensor: String, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for diagnostics and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Invariant,
}

impl GwqError {
    pub fn parse(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        GwqError::Parse {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GwqError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            GwqError::Config(_) => ErrorCategory::Usage,
            GwqError::Invariant(_) => ErrorCategory::Invariant,
            _ => ErrorCategory::Data,
        }
    }

    /// Short machine-greppable label, e.g. `parse` or `alignment`.
    pub fn label(&self) -> &'static str {
        match self {
            GwqError::Dimension(_) => "dimension",
            GwqError::Domain(_) => "domain",
            GwqError::Parse { .. } => "parse",
            GwqError::Format(_) => "format",
            GwqError::Alignment(_) => "alignment",
            GwqError::Input(_) => "input",
            GwqError::Encoding(_) => "encoding",
            GwqError::Training(_) => "training",
            GwqError::Config(_) => "usage",
            GwqError::Invariant(_) => "invariant",
            GwqError::Io { .. } => "io",
        }
    }
}
