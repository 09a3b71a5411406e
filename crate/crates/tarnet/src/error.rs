use std::path::{Path, PathBuf};

use tarnet_core::ErrorKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tarnet_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A file that exists but cannot be understood.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 2 for configuration and usage problems, 3 for data and file
    /// problems, 4 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(e) => match e.kind() {
                ErrorKind::Config | ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
            Error::Io { .. } | Error::Format { .. } => 3,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Core(tarnet_core::Error::Config(msg.into()))
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Core(tarnet_core::Error::Usage(msg.into()))
}
