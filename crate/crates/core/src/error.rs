use alloc::string::String;

/// Errors raised by tensor kernels, model assembly and configuration.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("tape error: {0}")]
    Tape(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use shape_err;
