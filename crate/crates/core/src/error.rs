use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] fgi_tensor::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Tensor(fgi_tensor::Error::Config(_)) | Error::Config(_) => ErrorKind::Config,
            Error::Tensor(fgi_tensor::Error::Usage(_)) | Error::Usage(_) => ErrorKind::Usage,
            Error::Tensor(fgi_tensor::Error::Numeric { .. }) | Error::Numeric(_) => ErrorKind::Numeric,
            Error::Data(_) => ErrorKind::Data,
            Error::Format(_) | Error::Io(_) => ErrorKind::Io,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Usage,
    Data,
    Numeric,
    Io,
}

pub(crate) fn config_err<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage_err<S: Into<String>>(msg: S) -> Error {
    Error::Usage(msg.into())
}
