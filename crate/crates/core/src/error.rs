use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("angle undefined: zero-norm vector")]
    ZeroNorm,

    #[error("{0} requires tied weights")]
    RequiresTied(&'static str),

    #[error("{0} requires untied weights")]
    RequiresUntied(&'static str),

    #[error("state diverged during {phase} at step {step}")]
    Divergence { phase: &'static str, step: usize },

    #[error("too many divergent samples in batch: {skipped} of {total}")]
    BatchDivergence { skipped: usize, total: usize },

    #[error("state is not a steady state: residual {residual:e} >= tolerance {tol:e}")]
    NotConverged { residual: f64, tol: f64 },

    #[error("requested {k} backward steps but trajectory only has {t} transitions")]
    TrajectoryTooShort { k: usize, t: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("unknown quantity `{0}`")]
    UnknownQuantity(String),

    #[error("{path}: bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file: expected {expected} bytes of payload, found {found}")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("label {label} out of range at index {index}")]
    IdxLabel { index: usize, label: u8 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::ZeroNorm
                | Error::Divergence { .. }
                | Error::BatchDivergence { .. }
                | Error::NotConverged { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
