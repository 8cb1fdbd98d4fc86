//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library and surfaced through the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// File does not start with the `OCER` magic bytes.
    #[error("not a raster file (bad magic): {path}")]
    BadMagic { path: PathBuf },

    /// Container version is newer than this build understands.
    #[error("unsupported raster version {version}: {path}")]
    UnsupportedVersion { version: u16, path: PathBuf },

    /// Dtype code not in the format table.
    #[error("unsupported raster dtype code {code}: {path}")]
    UnsupportedDtype { code: u8, path: PathBuf },

    /// Payload shorter (or longer) than the header promises.
    #[error("truncated raster payload: expected {expected} bytes, got {got}: {path}")]
    TruncatedPayload {
        expected: usize,
        got: usize,
        path: PathBuf,
    },

    /// I/O failure with path context.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Shape or geometry mismatch between containers that must agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid configuration or constructor arguments.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Numerical precondition violated (non-finite data, degenerate input).
    #[error("numerical error: {0}")]
    Numerics(String),

    /// Config file grammar violation.
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    /// Error tagged with the pipeline stage in which it occurred.
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
