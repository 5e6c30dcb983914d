use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DpaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DpaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by `{op}`")]
    NonFiniteValue { op: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    #[error("GeM exponent must be finite and positive, got {0}")]
    InvalidAlpha(f64),

    #[error("spatial size mismatch: module bound to {expected:?}, input is {got:?}")]
    SpatialSizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate batch: no anchor has both a positive and a negative")]
    DegenerateBatch,

    #[error("need at least {needed} identities, dataset has {available}")]
    InsufficientIdentities { needed: usize, available: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("queries without a valid gallery match: {0:?}")]
    NoValidMatch(Vec<usize>),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("image not found: {0}")]
    MissingImage(PathBuf),

    #[error("identity ids are not dense in [0, {expected}): missing {missing:?}")]
    NonDenseIdentityIds { expected: usize, missing: Vec<usize> },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DpaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DpaError::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DpaError::ConfigInvalid(msg.into())
    }

    pub(crate) fn parse(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        DpaError::Parse {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
