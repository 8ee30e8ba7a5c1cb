use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error("malformed key-value file: {0}")]
    KeyValue(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infeasible code length: r = {bits} needs at least r + 1 samples, modality {modality} has {samples}")]
    InfeasibleBits {
        bits: usize,
        modality: usize,
        samples: usize,
    },

    #[error("singular normal equations in hash-function update; retry with ridge > 0")]
    Singular,

    #[error("{stage} objective increased at iteration {iteration}: {previous} -> {current}")]
    ObjectiveIncreased {
        stage: &'static str,
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("unknown modality {0}")]
    UnknownModality(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
