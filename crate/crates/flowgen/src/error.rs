//! Crate-wide error type with a stable mapping to CLI exit codes.

use std::fmt;
use std::io;

use flowgen_tensor::TensorError;

#[derive(Debug)]
pub enum Error {
    /// Bad command line or config file contents. Exit code 1.
    Usage(String),
    /// Unreadable/malformed inputs, line mismatches, lock conflicts. Exit code 2.
    Data(String),
    Io(io::Error),
    /// Kernel-level contract violations (shapes, masks, vocab ids). Exit code 2.
    Tensor(TensorError),
    /// Non-finite losses and other numerical failures. Exit code 3.
    Numerical(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Tensor(_) => 2,
            Error::Numerical(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Tensor(e) => write!(f, "tensor error: {e}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Tensor(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
