use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An observation does not have the layout its model requires.
    #[error("observation layout error: {0}")]
    Layout(String),

    /// Parameter values outside the range a model admits.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Gram matrix of a weight measure is numerically singular.
    #[error("degenerate weight: Gram matrix condition number {condition:.3e} exceeds {limit:.0e}")]
    DegenerateWeight { condition: f64, limit: f64 },

    /// Least-squares design matrix is numerically singular.
    #[error("collinear basis: design Gram condition number {condition:.3e} exceeds {limit:.0e}")]
    CollinearBasis { condition: f64, limit: f64 },

    #[error("data error: {0}")]
    Data(String),

    /// Malformed input file; `field` names the offending field or column.
    #[error("malformed {what}: field `{field}`: {message}")]
    Format {
        what: &'static str,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            field: field.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from malformed user input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Config(_))
    }
}
