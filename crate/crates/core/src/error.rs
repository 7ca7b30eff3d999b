use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("duplicate external id `{0}`")]
    DuplicateExternalId(String),

    #[error("unknown document `{0}`")]
    UnknownDocument(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("document `{0}` has no character n-grams; cannot embed a zero vector")]
    ZeroEmbedding(String),

    #[error("duplicate docid `{0}`")]
    DuplicateDocid(String),

    #[error("prefix `{0}` is not a path in the docid trie")]
    InvalidPrefix(String),

    #[error("empty query")]
    EmptyQuery,

    #[error("empty input sequence")]
    EmptyInput,

    #[error("non-finite values in `{0}`")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("noise calibration failed for target WER {target:.4}: best achieved {best:.4}")]
    Calibration { target: f64, best: f64 },

    #[error("missing systems: {}", .0.join(", "))]
    MissingSystems(Vec<String>),

    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    ConfigMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
