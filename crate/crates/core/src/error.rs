use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("label out of range: {label} with {palette} phases")]
    LabelOutOfRange { label: u8, palette: usize },
    #[error("invalid scale factor {0}: must be 64/d for an integer 8 <= d <= 64")]
    InvalidScaleFactor(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid phase mapping: {0}")]
    Mapping(String),
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("input too small: {0}")]
    TooSmall(String),
    #[error("unknown phase {0}")]
    UnknownPhase(usize),
    #[error("image decode error: {0}")]
    Image(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("solver error: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
