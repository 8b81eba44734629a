use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad container format: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("pattern not satisfiable: {0}")]
    Pattern(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("matrix of size {dim} is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { dim: usize, index: usize, pivot: f64 },

    #[error("{stage} failed{}: {source}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        row: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str, row: Option<usize>) -> Self {
        Error::Stage {
            stage,
            row,
            source: Box::new(self),
        }
    }

    /// Innermost error with any stage annotations peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NotPositiveDefinite { .. } | Error::NonFinite(_)
        )
    }
}
