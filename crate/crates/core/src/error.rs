use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its preconditions (shape, range, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A finite-difference oracle hit a non-finite evaluation.
    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    /// Invalid configuration; `key` names the offending field.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("malformed metrics csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
