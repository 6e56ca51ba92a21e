use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("trailing bytes: {0} bytes after payload")]
    TrailingBytes(u64),

    #[error("non-finite element at index {0}")]
    NonFinite(usize),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("hessian is already finalized")]
    AlreadyFinalized,

    #[error("hessian is not finalized")]
    NotFinalized,

    #[error("cholesky factorization failed at pivot {pivot} (value {value}); increase damping")]
    Cholesky { pivot: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("corrupt codebook: {0}")]
    CorruptCodebook(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
