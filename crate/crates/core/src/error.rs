use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: dimension mismatch (expected {expected_img}x{expected_txt}, found {found_img}x{found_txt})")]
    ShardDimensionMismatch {
        path: PathBuf,
        expected_img: usize,
        expected_txt: usize,
        found_img: usize,
        found_txt: usize,
    },

    #[error("{path}: {detail}")]
    CorruptShard { path: PathBuf, detail: String },

    #[error("{path}: checksum mismatch (manifest {expected}, file {found})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient records: requested {requested}, available {available}")]
    InsufficientRecords { requested: usize, available: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss became non-finite at step {step} (loss = {loss})")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("scoring failed for record {id}: {source}")]
    Scoring {
        id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("filtering with keep_fraction {keep_fraction} produced an empty pool")]
    EmptyFilteredPool { keep_fraction: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
