//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A tensor or image did not have the shape the operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// Non-finite values or otherwise numerically invalid input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration (bad window, unknown backbone, hook outside grid, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The LLM planner could not produce a valid plan after retries.
    /// `raw` carries the last raw backend output for diagnosis.
    #[error("planning error: {message}")]
    Planning { message: String, raw: String },

    /// Strict agent-response parsing failed. `offset` is the byte offset in
    /// the raw response where parsing gave up.
    #[error("parse error at offset {offset}: {message}")]
    Parse { message: String, offset: usize },

    /// A completion backend call failed (transport, timeout, HTTP status).
    #[error("backend '{backend}' error: {message}")]
    Backend { backend: String, message: String },

    /// Benchmark set violated its schema. `line` is 1-based in the JSONL file.
    #[error("benchmark load error at line {line}: {message}")]
    BenchmarkLoad { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
