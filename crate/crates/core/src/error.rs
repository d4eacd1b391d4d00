use thiserror::Error;

/// Errors raised by the library.
///
/// `Constraint` covers violated invariants of domain values (field name in
/// `field`); the CLI maps it to exit status 3. Everything that comes from
/// reading or parsing input maps to exit status 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Constraint { field: &'static str, reason: String },

    #[error("snippet index out of grid: {index} >= {len}")]
    SnippetOutOfGrid { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask grids differ")]
    GridMismatch,

    #[error("unknown fusion strategy `{0}`")]
    UnknownStrategy(String),

    #[error("cannot place {actions} actions in video {video}")]
    InfeasiblePacking { video: usize, actions: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn constraint(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Constraint {
            field,
            reason: reason.into(),
        }
    }
}
