use alloc::string::String;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Invalid environment, policy or training configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An exact computation would exceed the enumeration bound.
    #[error("capacity error: {0}")]
    Capacity(String),
    /// A non-finite value appeared in an objective or gradient.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
