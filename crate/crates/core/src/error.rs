use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("corrupt image payload in {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("tensor data contains a non-finite value")]
    NonFinite,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("degenerate shape {height}x{width}: maximum spectral radius is zero")]
    DegenerateShape { height: usize, width: usize },

    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),

    #[error("input {height}x{width} is smaller than one {gamma}x{gamma} pooling window")]
    PoolingWindow {
        height: usize,
        width: usize,
        gamma: usize,
    },

    #[error("layer dimension chain mismatch: {0}")]
    DimensionChain(String),

    #[error("loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("non-finite input gradient at attack iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("training diverged in {stage} at iteration {iteration}: loss = {loss}")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        loss: f64,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid attack configuration: {0}")]
    InvalidAttack(String),

    #[error("attack invariant violated: {0}")]
    AttackInvariant(String),

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics (divergence, non-finite values)
    /// rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite | Error::NonFiniteGradient { .. } | Error::Divergence { .. }
        )
    }
}
