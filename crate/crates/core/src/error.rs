use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numerical core and the training pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    InvalidArgument(String),
    /// Operand shapes are incompatible.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A cue provider failed. `retryable` marks transient transport failures.
    Provider { retryable: bool, message: String },
    /// A cue provider answered with a malformed or mis-sized payload.
    Protocol(String),
    /// A loss or parameter became non-finite.
    Diverged {
        phase: &'static str,
        epoch: u32,
        detail: String,
    },
    /// A dataset or label file violates its schema.
    Validation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Provider { retryable: true, .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Shape { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Provider { retryable, message } => {
                if *retryable {
                    write!(f, "cue provider error (retryable): {message}")
                } else {
                    write!(f, "cue provider error: {message}")
                }
            }
            Error::Protocol(m) => write!(f, "cue provider protocol error: {m}"),
            Error::Diverged { phase, epoch, detail } => {
                write!(f, "training diverged in {phase} at epoch {epoch}: {detail}")
            }
            Error::Validation(m) => write!(f, "validation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
