use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate mask: row {row} has no valid position")]
    DegenerateMask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("token id {id} out of vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("wav format error in field `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("signal too short: {samples} samples, need at least {frame} for one frame")]
    TooShort { samples: usize, frame: usize },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("schema error at line {line}: {detail}")]
    Schema { line: usize, detail: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
