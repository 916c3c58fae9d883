use std::fmt;

/// Unified error type for the whole pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An axis argument is out of range or empty for the given shape.
    InvalidAxis { axis: usize, shape: Vec<usize> },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Inputs are numerically degenerate (e.g. zero-norm vectors).
    DegenerateInput(String),
    /// A caller-side contract was violated (wrong arity, empty set, ...).
    Contract(String),
    /// Token id outside the vocabulary.
    Vocabulary { id: u32, vocab_size: usize },
    /// Input text exceeds the tokenizer capacity.
    Truncation { len: usize, limit: usize },
    /// A sequence edit does not fit within max_len.
    Capacity { needed: usize, max: usize },
    /// Checkpoint or report bytes do not match the expected format.
    Format(String),
    /// Checkpoint bytes are structurally valid but incomplete or damaged.
    Corrupted(String),
    /// Training diverged (non-finite loss) at the given step.
    TrainingFailure { step: usize },
    /// Feature inversion diverged at the given step.
    OptimizationFailure { step: usize },
    /// A landscape grid point evaluated to a non-finite loss.
    LandscapeFailure { row: usize, col: usize },
    /// A synthetic regime violates its scaling assumptions.
    Construction(String),
    /// Bad key=value configuration input.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::InvalidAxis { axis, shape } => {
                write!(f, "axis {axis} is invalid for shape {shape:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Vocabulary { id, vocab_size } => {
                write!(f, "token id {id} outside vocabulary of size {vocab_size}")
            }
            Error::Truncation { len, limit } => {
                write!(f, "input of {len} bytes exceeds the {limit}-byte limit")
            }
            Error::Capacity { needed, max } => {
                write!(f, "sequence needs {needed} positions but max_len is {max}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Corrupted(msg) => write!(f, "corrupted checkpoint: {msg}"),
            Error::TrainingFailure { step } => {
                write!(f, "training diverged (non-finite loss) at step {step}")
            }
            Error::OptimizationFailure { step } => {
                write!(f, "inversion diverged (non-finite loss) at step {step}")
            }
            Error::LandscapeFailure { row, col } => {
                write!(f, "non-finite landscape loss at grid point ({row}, {col})")
            }
            Error::Construction(msg) => write!(f, "regime construction: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
