use thiserror::Error;

/// Crate-wide error type. Every fallible operation reports enough context to
/// identify the failing call site without a debugger.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: operands live on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("{op}: operands have different precisions")]
    PrecisionMismatch { op: &'static str },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: invalid argument: {what}")]
    InvalidArgument { op: &'static str, what: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("undefined: {what}")]
    Undefined { what: String },
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("gradient check failed for {block}: max relative error {max_rel_err:e}")]
    GradCheckFailed { block: String, max_rel_err: f64 },
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
