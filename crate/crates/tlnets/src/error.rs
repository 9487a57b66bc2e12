use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone)]
pub enum Error {
    /// Incompatible shapes or lengths.
    Dimension(String),
    /// An argument violated a precondition (bad mask, even kernel, ...).
    Validation(String),
    /// An iterative routine failed to converge or produced non-finite values.
    Numeric {
        what: String,
        /// Residual or offending value at the point of failure.
        residual: f64,
    },
    /// An object was used after it was consumed (e.g. a tape after backward).
    State(String),
    /// A cell of an input file could not be parsed. Row and column are
    /// zero-based positions in the file, header included.
    Parse {
        row: usize,
        col: usize,
        message: String,
    },
    /// A configuration file failed validation; `key` is the offending path.
    Config { key: String, message: String },
    /// I/O failure, with the path involved.
    Io { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Numeric { what, residual } => {
                write!(f, "numeric error: {what} (residual {residual:e})")
            }
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Parse { row, col, message } => {
                write!(f, "parse error at row {row}, column {col}: {message}")
            }
            Error::Config { key, message } => write!(f, "config error at `{key}`: {message}"),
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<String>, err: impl fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
