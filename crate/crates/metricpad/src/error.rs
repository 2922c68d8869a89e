use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] metricpad_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage and configuration problems, 2 for data and IO, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        use metricpad_core::Error as C;
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => 2,
            Error::Core(e) if e.is_numerical() => 3,
            Error::Core(C::InvalidConfig(_) | C::InvalidProtocol(_)) => 1,
            Error::Core(_) => 2,
        }
    }
}
