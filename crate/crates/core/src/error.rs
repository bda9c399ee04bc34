use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file or message did not follow its declared format.
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("index ({row}, {col}) outside {height}x{width} image")]
    OutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("scan provider failed: {0}")]
    Provider(String),
}

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by unreadable or malformed inputs rather
    /// than by the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format { .. } | Error::Json(_))
    }
}
