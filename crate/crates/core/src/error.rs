use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reranking toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("blank line")]
    BlankLine,
    #[error("malformed line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("negative frequency on line {line}")]
    NegativeFrequency { line: usize },
    #[error("empty knowledge base")]
    EmptyKb,
    #[error("unencodable word {0:?}")]
    Unencodable(String),
    #[error("no confusable position")]
    NoConfusablePosition,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("references required")]
    ReferencesRequired,
    #[error("missing model for scorer {0}")]
    MissingModel(String),
    #[error("vocabulary hash mismatch: artifact {artifact}, data {data}")]
    VocabMismatch { artifact: String, data: String },
    #[error("bad format in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
