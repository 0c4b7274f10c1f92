use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A grid index fell outside the grid.
    #[error("index ({row}, {col}) out of range for {rows}x{cols} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    /// The point coincides with the camera's ground projection, so no view ray exists.
    #[error("degenerate view ray: point coincides with the camera ground projection")]
    DegenerateRay,

    /// Rejection sampling ran out of attempts.
    #[error("capacity exhausted: {0}")]
    Capacity(String),

    /// A numerical procedure produced a non-finite value.
    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    /// A configuration value failed validation; `key` is the dotted key path.
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    /// A file could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn validation(key: &str, msg: impl Into<String>) -> Error {
    Error::Validation {
        key: key.to_string(),
        message: msg.into(),
    }
}
