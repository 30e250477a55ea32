use std::fmt;
use std::io;

/// CLI-facing error with the exit-code classification from the interface
/// contract: usage errors exit 1, data/contract errors exit 2.
#[derive(Debug)]
pub enum Error {
    Usage(String),
    Data(String),
    Io(io::Error),
    Core(ti2v_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
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
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Data(m) => write!(f, "{m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<ti2v_core::Error> for Error {
    fn from(e: ti2v_core::Error) -> Self {
        Error::Core(e)
    }
}
