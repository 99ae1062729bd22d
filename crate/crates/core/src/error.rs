use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a formula (for example a
    /// parallel size of zero).
    #[error("domain error: {0}")]
    Domain(String),

    /// The configuration text could not be parsed.
    #[error("parse error in {source_name}: {message}")]
    Parse {
        source_name: String,
        message: String,
    },

    /// A configuration value violates an invariant. `field` is the dotted
    /// path of the offending key, e.g. `model.top_k`.
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    /// An operator graph is malformed (cycle, bad fusion, missing node).
    #[error("graph error: {0}")]
    Graph(String),

    /// A costing input is missing or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }

    /// True for errors caused by user input rather than by the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Graph(_))
    }
}
