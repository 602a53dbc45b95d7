use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants follow the failure classes the operations distinguish:
/// shape problems, invalid parameters, numeric breakdowns and API misuse.
#[derive(Debug, Error)]
pub enum MateError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MateError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        MateError::Param(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        MateError::Numeric(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        MateError::Usage(msg.into())
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        MateError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MateError>;
