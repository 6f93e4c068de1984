use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// One or more problems with a configuration or call arguments.
    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A caller broke an operation's precondition (shape mismatch, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values during optimisation, before client/round context is attached.
    #[error("diverged: {0}")]
    Diverged(String),

    #[error("training diverged for client {client} at round {round}: {reason}")]
    Training {
        client: usize,
        round: usize,
        reason: String,
    },

    #[error("ingestion error in {}{}: {reason}", path.display(), offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Ingestion {
        path: PathBuf,
        offset: Option<u64>,
        reason: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn ingestion(path: impl Into<PathBuf>, offset: Option<u64>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Contract(_) | Error::Diverged(_) | Error::Training { .. } | Error::Io { .. } => 2,
            Error::Ingestion { .. } => 3,
        }
    }
}
