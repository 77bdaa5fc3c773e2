use std::path::PathBuf;

/// Errors raised anywhere in the completion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input outside an operation's mathematical domain, e.g. `log` of a non-positive value.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared while finite checking was enabled.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed text or binary input. `location` is a line number or byte offset.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Bad or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(location: impl ToString, message: impl Into<String>) -> Self {
        Error::Parse { location: location.to_string(), message: message.into() }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
