use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or traces that do not fit together.
    #[error("structural error: {0}")]
    Structure(String),
    /// A problem definition violates its invariants (p < 2, empty batch, ...).
    #[error("invalid problem: {0}")]
    Spec(String),
    #[error("{0} is outside the domain {1}")]
    Domain(String, String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
