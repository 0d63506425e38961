use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("truncated payload: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown config key {key:?} on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("refusing to write into non-empty directory {0} (use --force)")]
    NotEmpty(PathBuf),
    #[error("variant {0:?} needs a checkpoint")]
    MissingCheckpoint(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Core(#[from] flowscale_core::Error),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
