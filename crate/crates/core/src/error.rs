use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite state in {context} at step {step} (step size too large?)")]
    NonFinite { context: &'static str, step: usize },

    #[error("degenerate Jacobian at t-index {t_index}, landmark {landmark}: |det| = {det:e}")]
    DegenerateJacobian {
        t_index: usize,
        landmark: usize,
        det: f64,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(
        "importance weights underflowed for all {samples} samples; \
         increase lambda or use a bridge sampler"
    )]
    WeightUnderflow { samples: usize },

    #[error("unknown {registry} '{name}' (known: {known})")]
    UnknownStrategy {
        registry: &'static str,
        name: String,
        known: String,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
