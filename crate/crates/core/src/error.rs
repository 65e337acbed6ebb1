use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} is outside the open interval (-1, 1)")]
    OutOfRange { value: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("trailing bytes after payload ({0} bytes)")]
    TrailingBytes(u64),

    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("no pose for timestep t={0}")]
    MissingPose(f64),

    #[error("invalid depth distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown config key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Maps `UnexpectedEof` from a binary reader onto [`Error::Truncated`].
pub(crate) fn eof_as_truncated(what: &str) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}
