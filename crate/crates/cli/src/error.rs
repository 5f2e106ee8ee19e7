use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated input: needed {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("architecture mismatch on `{key}`: checkpoint has {found}, expected {expected}")]
    ArchMismatch {
        key: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParameter(String),
    #[error("checkpoint has unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] satskip_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
