//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the editing engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid distribution: {0}")]
    Domain(String),
    #[error("invalid span: {0}")]
    Span(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid patch: {0}")]
    Patch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("linear algebra error: {0}")]
    Algebra(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("run degraded: {0}")]
    Degraded(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
