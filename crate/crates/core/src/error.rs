//! Error type shared by every engine module.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = MllError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MllError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate id(s): {}", .0.join(", "))]
    DuplicateId(Vec<String>),

    #[error("unresolved reference(s): {}", format_pairs(.0))]
    UnresolvedReference(Vec<(String, String)>),

    #[error("degenerate embedding for id `{0}` (zero norm)")]
    DegenerateEmbedding(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("store corrupted at {path}: checksum {actual} does not match manifest {expected}")]
    Corruption {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("incomplete embeddings, missing: {}", .0.join(", "))]
    IncompleteEmbeddings(Vec<String>),

    #[error("stale graph: label covers graph version {label}, graph is version {graph}")]
    StaleGraph { label: u64, graph: u64 },

    #[error("stale label(s) for model(s) {}: graph is version {graph}", .models.join(", "))]
    StaleLabel { models: Vec<String>, graph: u64 },

    #[error("no candidate nodes to match against")]
    NoCandidates,

    #[error("model hub is empty")]
    NoModels,

    #[error("incomplete metadata: model(s) {} lack `{field}`", .models.join(", "))]
    IncompleteMetadata { field: String, models: Vec<String> },

    #[error("infeasible fixture: {0}")]
    InfeasibleFixture(String),

    #[error("{} already exists", .0.display())]
    AlreadyExists(PathBuf),

    #[error("caption service: {0}")]
    CaptionService(String),

    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl MllError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MllError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        MllError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures of the environment (filesystem, network) rather than
    /// of the user's inputs.
    pub fn is_environmental(&self) -> bool {
        matches!(self, MllError::Io { .. } | MllError::CaptionService(_))
    }
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(from, to)| format!("{from} -> {to}"))
        .collect::<Vec<_>>()
        .join(", ")
}
