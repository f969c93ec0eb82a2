use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffLmError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("stride {stride} does not divide step count {steps}")]
    InvalidStride { stride: usize, steps: usize },
    #[error("step {step} out of range [{min}, {max}]")]
    StepOutOfRange { step: usize, min: usize, max: usize },
    #[error("degenerate diffusion step {step}: {detail}")]
    DegenerateStep { step: usize, detail: String },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss in term `{term}`")]
    NonFiniteLoss { term: String },
    #[error("non-finite guidance gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("training diverged at iteration {iteration}: loss {loss} vs initial {initial}")]
    Divergence { iteration: usize, loss: f64, initial: f64 },
    #[error("empty sample set")]
    EmptySet,
    #[error("context of {context} tokens does not fit sequence length {seq_len}")]
    ContextTooLong { context: usize, seq_len: usize },
    #[error("length target {target} outside [1, {max}]")]
    TargetOutOfRange { target: usize, max: usize },
    #[error("task kind mismatch: {0}")]
    KindMismatch(String),
    #[error("label shape mismatch: {0}")]
    LabelShapeMismatch(String),
    #[error("corpus spec invalid: {0}")]
    SpecInvalid(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DiffLmError>;
