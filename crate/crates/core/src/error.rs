use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A softmax row had no finite entry; the attention mask is malformed.
    MaskedRow { row: usize },
    /// A probability row does not sum to one.
    Distribution { row: usize, sum: f64 },
    /// A value that must be finite was not.
    NonFinite { what: String },
    PositionOverflow { position: usize, max_position: usize },
    MaskLength { expected: (usize, usize), found: (usize, usize) },
    TokenOutOfRange { token: u32, vocab_size: usize },
    RankTooLarge { rank: usize, limit: usize },
    Budget { needed: usize, available: usize },
    InvalidLayout(String),
    InvalidConfig(String),
    Misaligned { teacher: usize, student: usize },
    /// Training produced a non-finite loss.
    Divergence { step: usize, loss: f64 },
    IncompatibleModel,
    /// Pretraining did not reach its recall target within the step budget.
    RecallNotReached { recall: f64, target: f64, steps: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::MaskedRow { row } => {
                write!(f, "softmax row {row} has no finite entry (malformed attention mask)")
            }
            Error::Distribution { row, sum } => {
                write!(f, "probability row {row} sums to {sum}, expected 1")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::PositionOverflow { position, max_position } => {
                write!(f, "position {position} exceeds max_position {max_position}")
            }
            Error::MaskLength { expected, found } => write!(
                f,
                "mask is {}x{} but the sequence needs {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Error::TokenOutOfRange { token, vocab_size } => {
                write!(f, "token id {token} is outside the vocabulary of {vocab_size}")
            }
            Error::RankTooLarge { rank, limit } => {
                write!(f, "adapter rank {rank} exceeds projection dimension {limit}")
            }
            Error::Budget { needed, available } => {
                write!(f, "budget of {available} tokens is too small, {needed} needed")
            }
            Error::InvalidLayout(msg) => write!(f, "invalid segment layout: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Misaligned { teacher, student } => write!(
                f,
                "teacher block has {teacher} rows but student block has {student}"
            ),
            Error::Divergence { step, loss } => {
                write!(f, "training diverged at step {step}: loss = {loss}")
            }
            Error::IncompatibleModel => {
                write!(f, "artifact fingerprint does not match the model weights")
            }
            Error::RecallNotReached { recall, target, steps } => write!(
                f,
                "full-context recall {recall:.3} below target {target:.3} after {steps} steps"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
