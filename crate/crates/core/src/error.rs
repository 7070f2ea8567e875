use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("vocabulary target size {requested} is below the minimum feasible size {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("vocabulary file version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error("malformed file {file} at line {line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },

    #[error("parallel files are not aligned: {src_path} has {src_lines} lines, {tgt_path} has {tgt_lines}")]
    Misaligned {
        src_path: String,
        src_lines: usize,
        tgt_path: String,
        tgt_lines: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for tensor {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("position {position} exceeds max_positions {max}")]
    PositionOutOfRange { position: usize, max: usize },

    #[error("non-finite loss at step {step} ({header})")]
    NonFiniteLoss { step: u64, header: String },

    #[error("json error: {0}")]
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
}
