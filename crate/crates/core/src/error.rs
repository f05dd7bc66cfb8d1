use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("duplicate id: {0}")]
    Duplicate(String),

    #[error("empty baseline: {0}")]
    EmptyBaseline(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the underlying reader or writer rather than of
    /// the data itself.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Schema(format!("{other:?}")),
            }
        } else {
            Error::Schema(err.to_string())
        }
    }
}
