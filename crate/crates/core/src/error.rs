use alloc::string::String;

/// Errors raised anywhere in the engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The caller violated a precondition (shapes, indices, ranges).
    #[error("usage error: {0}")]
    Usage(String),
    /// A NaN or infinity appeared in a computed quantity.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The request is well formed but exceeds what can be enumerated.
    #[error("capability error: {0}")]
    Capability(String),
    /// Conjugate gradient residual kept growing.
    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! usage {
    ($($arg:tt)*) => {
        $crate::Error::Usage(alloc::format!($($arg)*))
    };
}

macro_rules! numerical {
    ($($arg:tt)*) => {
        $crate::Error::Numerical(alloc::format!($($arg)*))
    };
}

pub(crate) use numerical;
pub(crate) use usage;
