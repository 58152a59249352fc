use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or parameter combination is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Internal data violated an invariant (e.g. a token index out of range).
    #[error("invariant violation: {0}")]
    Invariant(String),
    /// The requested operation is not available in this mode.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A persisted file is truncated, corrupt or of an unknown version.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Invariant(_) => "invariant",
            Error::Unsupported(_) => "unsupported",
            Error::NonFinite(_) => "non_finite",
            Error::Integrity(_) => "integrity",
            Error::Io(_) => "io",
        }
    }

    /// Same kind, message prefixed with `what`.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{what}: {m}")),
            Error::Usage(m) => Error::Usage(format!("{what}: {m}")),
            Error::Invariant(m) => Error::Invariant(format!("{what}: {m}")),
            Error::Unsupported(m) => Error::Unsupported(format!("{what}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{what}: {m}")),
            Error::Integrity(m) => Error::Integrity(format!("{what}: {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{what}: {e}"))),
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
