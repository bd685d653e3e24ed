use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {message}")]
    InvalidInput { field: &'static str, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("empty trajectory for player {player_id} day {day}")]
    EmptyTrajectory { player_id: u32, day: u16 },

    #[error("non-finite activation in {location}")]
    NonFinite { location: String },

    #[error("vocabulary hash mismatch: checkpoint {expected}, tokenizer {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("not found: {0}")]
    NotFound(String),
}

impl Error {
    pub fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidInput {
            field,
            message: message.into(),
        }
    }

    pub fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI and the HTTP API.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput { .. } => "invalid_input",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::EmptyTrajectory { .. } => "empty_trajectory",
            Error::NonFinite { .. } => "non_finite",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::NotFound(_) => "not_found",
        }
    }
}
