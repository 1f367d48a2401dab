//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. The variants map onto
//! the process exit codes used by the CLI: configuration, format and data
//! problems exit with 1, numeric failures with 2.

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value (file, CLI override, or struct field) is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric computation failed (non-convergence, NaN, not PSD, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An on-disk artifact does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    /// Payload values are unusable (NaN/Inf, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// An operation-specific precondition was violated by the caller.
    #[error("precondition error: {0}")]
    Precondition(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_error_class() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Format("x".into()).exit_code(), 1);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 2);
    }
}
