use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PNG {}: {reason}", path.display())]
    MalformedPng { path: PathBuf, reason: String },

    #[error("unsupported bit depth {depth} in {} (8-bit PNG required)", path.display())]
    UnsupportedBitDepth { path: PathBuf, depth: u8 },

    #[error("unsupported PNG color type {color} in {}", path.display())]
    UnsupportedColorType { path: PathBuf, color: String },

    #[error(
        "{} is an RGB mask without a palette; convert it to a single-channel 8-bit PNG \
         whose pixel values are object ids",
        path.display()
    )]
    RgbMask { path: PathBuf },

    #[error("bad tensor magic {0:?} (expected \"SDFT\")")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported tensor dtype {0} (only 1 = float32 LE)")]
    UnsupportedDtype(u8),

    #[error("tensor payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadMismatch { expected: usize, actual: usize },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("search window does not intersect the frame")]
    EmptyWindow,

    #[error("object {0} has no pixels in the mask")]
    EmptyObject(u8),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bound undefined: {0}")]
    BoundDomain(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
