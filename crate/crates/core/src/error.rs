use std::path::PathBuf;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a finite scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigen solver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} out of range [{lo}, {hi}] for {what}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("image is constant, cannot normalize")]
    ConstantImage,

    #[error("transformed value {0} is below the inverse-transform guard")]
    BelowGuard(f64),

    #[error("too few patches: {found} available, {needed} needed")]
    TooFewPatches { found: usize, needed: usize },

    #[error("blind-spot violation: centre reachable via {path}")]
    BlindSpotViolation { path: String },

    #[error("malformed network config at line {line}: {msg}")]
    NetConfig { line: usize, msg: String },

    #[error("malformed run config at line {line}: {msg}")]
    RunConfig { line: usize, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
