use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {what} index {index} out of range (have {count})")]
    IndexOutOfRange { line: usize, what: &'static str, index: i64, count: usize },
    #[error("line {line}: face corner has no uv index")]
    MissingUv { line: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("degenerate extent: selected positions are all identical")]
    DegenerateExtent,
    #[error("uv overlap: faces {faces:?} cover pixel ({x}, {y})")]
    UvOverlap { faces: Vec<usize>, x: usize, y: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) | Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
