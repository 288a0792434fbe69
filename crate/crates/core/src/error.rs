use std::io;
use std::path::PathBuf;

use crate::store::{RecordId, Stage};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("encoding error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("kind `{kind}` is not valid for stage {stage}")]
    InvalidKind { stage: Stage, kind: String },

    #[error("invariant violated for {kind}: {reason}")]
    Invariant { kind: String, reason: String },

    #[error("unknown record {0}")]
    UnknownId(RecordId),

    #[error("unknown {what} `{id}`")]
    NotFound { what: &'static str, id: String },

    #[error("malformed record id `{0}`")]
    BadRecordId(String),

    #[error("provenance stage constraint violated: {0}")]
    StageConstraint(String),

    #[error("stage precondition unmet: {0}")]
    Precondition(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("store file {path} is corrupt at line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("store is locked by another process ({0})")]
    Locked(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable reason code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Json(_) => "encoding",
            Error::InvalidKind { .. } => "invalid_kind",
            Error::Invariant { .. } => "invariant_violation",
            Error::UnknownId(_) => "unknown_id",
            Error::NotFound { .. } => "not_found",
            Error::BadRecordId(_) => "bad_record_id",
            Error::StageConstraint(_) => "stage_constraint",
            Error::Precondition(_) => "precondition",
            Error::Conflict(_) => "conflict",
            Error::Config(_) => "config",
            Error::Corrupt { .. } => "corrupt_store",
            Error::Locked(_) => "locked",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }

    pub(crate) fn invariant(kind: &str, reason: impl Into<String>) -> Self {
        Error::Invariant {
            kind: kind.to_string(),
            reason: reason.into(),
        }
    }
}
