use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("coincident residues {i} and {j}: log-distance ratio is singular")]
    Singularity { i: usize, j: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch in section '{section}' at byte offset {offset}")]
    Checksum { section: String, offset: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-greppable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::InvalidInput(_) => "invalid-input",
            Error::Singularity { .. } => "singularity",
            Error::NonFinite(_) => "non-finite",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::Config(_) => "config",
            Error::MissingGroundTruth(_) => "missing-ground-truth",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
