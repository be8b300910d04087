use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus incomplete: {0}")]
    CorpusIncomplete(String),

    #[error("schema violation in {path}: {reason}")]
    SchemaViolation { path: PathBuf, reason: String },

    #[error("fold arity: subject {subject} has {found} blocks, expected {expected}")]
    FoldArity {
        subject: String,
        found: usize,
        expected: usize,
    },

    #[error("degenerate class distribution: {0}")]
    DegenerateClasses(String),

    #[error("shape contract violated on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid label {0}; expected 0, 1 or 2")]
    InvalidLabel(u8),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical divergence at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("fold failure (subject {subject}, outer fold {fold}): {source}")]
    Fold {
        subject: String,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
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

    pub(crate) fn schema(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            axis,
            expected,
            got,
        })
    }
}
