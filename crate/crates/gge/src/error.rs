use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("numeric error in `{name}`: {detail}")]
    Numeric { name: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("empty question type {0}: no instances to accumulate")]
    EmptyType(usize),

    #[error("stale forward cache: {0}")]
    Cache(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
