use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label {0}: no domain-agnostic mapping registered")]
    UnknownLabel(String),

    #[error("unknown domain-agnostic type {0}")]
    UnknownAgnosticType(String),

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("nested intent in {0}")]
    NestedIntent(String),

    #[error("nested slot in {0}")]
    NestedSlot(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("token alignment failed: {0}")]
    Misaligned(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("provider mismatch: head trained with {expected}, called with {actual}")]
    ProviderMismatch { expected: String, actual: String },

    #[error("embedding cache corrupt at {path}:{line}: {reason}")]
    CacheCorrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("template not eligible for the query")]
    Ineligible,

    #[error("no eligible frame in the target space")]
    NoEligibleFrame,

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("duplicate template {0}")]
    DuplicateTemplate(String),

    #[error("mapping conflict for {label}: already {existing}, requested {requested}")]
    MappingConflict {
        label: String,
        existing: String,
        requested: String,
    },

    #[error("label {0} has no simple-label examples")]
    MissingExamples(String),

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("domain {0} missing from corpus")]
    MissingDomain(String),

    #[error("length mismatch: {predictions} predictions vs {golds} golds")]
    LengthMismatch { predictions: usize, golds: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name, used in JSON error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::UnknownAgnosticType(_) => "UnknownAgnosticType",
            Error::MalformedTree(_) => "MalformedTree",
            Error::NestedIntent(_) => "NestedIntent",
            Error::NestedSlot(_) => "NestedSlot",
            Error::InvalidFrame(_) => "InvalidFrame",
            Error::Misaligned(_) => "Misaligned",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ProviderUnavailable(_) => "ProviderUnavailable",
            Error::ProviderMismatch { .. } => "ProviderMismatch",
            Error::CacheCorrupt { .. } => "CacheCorrupt",
            Error::DegenerateData(_) => "DegenerateData",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Ineligible => "Ineligible",
            Error::NoEligibleFrame => "NoEligibleFrame",
            Error::SchemaError(_) => "SchemaError",
            Error::DuplicateTemplate(_) => "DuplicateTemplate",
            Error::MappingConflict { .. } => "MappingConflict",
            Error::MissingExamples(_) => "MissingExamples",
            Error::UnknownDomain(_) => "UnknownDomain",
            Error::MissingDomain(_) => "MissingDomain",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
