use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("antenna id {id} out of range for a_max = {a_max}")]
    AntennaId { id: usize, a_max: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("degenerate affine fit: {0}")]
    DegenerateFit(String),

    #[error("nodes {from} and {to} are not connected in the k-NN graph")]
    Unreachable { from: usize, to: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error(
        "n_e = 1 is excluded from evaluation: a single CIR carries no spatial diversity \
         and attention over one input compares nothing"
    )]
    ExcludedSingleAntenna,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("checkpoints are not comparable: {0}")]
    Comparability(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
