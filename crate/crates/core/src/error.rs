use std::io;

use thiserror::Error;

pub type Result<T, E = DcaError> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum DcaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network has a time embedding but no timestep was supplied (or vice versa)")]
    MissingTimestep,
    #[error("all mixture responsibilities underflowed at the query point")]
    NumericUnderflow,
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("step count {steps} outside 1..={max}")]
    StepCountOutOfRange { steps: usize, max: usize },
    #[error("source and target class are both {0}")]
    SameClass(usize),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("classifier is frozen")]
    Frozen,
    #[error("non-finite SDE state at step {step}")]
    NonFiniteState { step: usize },
    #[error("extraction interval {every} does not divide step count {steps}")]
    Divisibility { every: usize, steps: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no test points of class {0}")]
    EmptyClass(usize),
    #[error("pair ({0}, {1}) is not adjacent")]
    NonAdjacentPair(usize, usize),
    #[error("no finite barrier mean for transition {0} -> {1}")]
    MissingBarrierStats(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("empty point set")]
    EmptySet,
    #[error("need at least {k} reference points, have {have}")]
    InsufficientReference { k: usize, have: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations per sample, have {0}")]
    InsufficientSample(usize),
    #[error("empty split")]
    EmptySplit,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DcaError {
    /// True for failures caused by floating-point blowups rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DcaError::NumericUnderflow
                | DcaError::NonFiniteGradient { .. }
                | DcaError::NonFiniteLoss { .. }
                | DcaError::NonFiniteState { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DcaError::DimensionMismatch { expected, got })
    }
}
