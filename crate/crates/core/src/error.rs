use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing context: {0}")]
    MissingContext(String),

    #[error("history at t={t} cannot expose {what} at index {index}")]
    FutureAccess {
        t: usize,
        what: &'static str,
        index: usize,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("distance matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },

    #[error("no evaluation unit follows the policy prefix at t={t}")]
    DegenerateSupport { t: usize },

    #[error("degenerate outcome bounds: y_min = y_max = {0}")]
    DegenerateBounds(f64),

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle budget exceeded: {0}")]
    OracleBudget(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::DegenerateSupport { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
