use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: unsupported format version {found:?} (expected {expected})", path.display())]
    Version {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("{}: corrupt file: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] normforge_core::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input {what}: {}", path.display())]
    MissingInput { what: String, path: PathBuf },
    #[error("request for {context} failed after {attempts} attempt(s): {message}")]
    Transport {
        context: String,
        attempts: u32,
        message: String,
    },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("interrupted after {0} decisions")]
    Interrupted(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable category, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Version { .. } => "version",
            Error::Corrupt { .. } => "corrupt",
            Error::Core(_) => "invalid_data",
            Error::Config(_) => "config",
            Error::MissingInput { .. } => "missing_input",
            Error::Transport { .. } => "transport",
            Error::Protocol(_) => "protocol",
            Error::Interrupted(_) => "interrupted",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
