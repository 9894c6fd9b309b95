//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide error.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensor shapes that had to agree did not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A shape, axis, or extent is invalid for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// A precondition on the call was violated.
    Contract(String),
    /// The object is not in the state the operation requires.
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Dimension { op, detail } => write!(f, "{op}: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
