use thiserror::Error;

/// Errors raised by tensor construction, layer configuration and autodiff.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot be combined.
    #[error("configuration error: {0}")]
    Config(String),
    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A NaN or infinity showed up where a finite value is required.
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage_err<S: Into<String>>(msg: S) -> Error {
    Error::Usage(msg.into())
}
