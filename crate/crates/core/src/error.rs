use std::path::Path;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: String,
        left: String,
        right: String,
    },

    /// A caller-supplied value is out of range or otherwise unusable.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value (NaN or infinity) was encountered.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A text file failed to parse; the line number is 1-based.
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A dataset or model violates a structural invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        op: impl Into<String>,
        left: impl Into<String>,
        right: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
