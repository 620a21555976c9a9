use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unusable concept {0:?}: empty after normalization")]
    EmptyConcept(String),

    #[error("approved pairs reference unknown relations: {}", .0.join(", "))]
    UnresolvedRelations(Vec<String>),

    #[error("unknown relation {0}")]
    UnknownRelation(String),

    #[error("relation pair {0} ~ {1} is not approved")]
    NotApproved(String, String),

    #[error("undefined similarity: zero vector")]
    ZeroVector,

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("embedding provider failed for {} label(s): {reason}", labels.len())]
    Provider { labels: Vec<String>, reason: String },

    #[error("transcript incomplete: no response recorded for prompt {sha256}")]
    TranscriptIncomplete { sha256: String },

    #[error("llm backend failed after {attempts} attempt(s): {reason}")]
    Backend { attempts: u32, reason: String },

    #[error("unknown review item {0}")]
    UnknownItem(u64),

    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),

    #[error("{0} ~ {1} is not a candidate pair")]
    NotCandidate(String, String),

    #[error("{0} ~ {1} is already in the review queue")]
    DuplicatePair(String, String),

    #[error("agreement table is ragged: item {item} has {got} ratings, expected {expected}")]
    RaggedAgreement {
        item: usize,
        got: usize,
        expected: usize,
    },

    #[error("kappa undefined: {0}")]
    KappaUndefined(&'static str),

    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("overlap rate undefined for an empty external set")]
    EmptyExternalSet,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
