//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by metric, data, model and training operations.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// No records were supplied where at least one is required.
    EmptyInput,
    /// A protected-attribute group has no records, so a group rate is undefined.
    EmptyGroup { group: i8 },
    /// A (group, class) cell has no records, so an error rate is undefined.
    EmptyClassWithinGroup { group: i8, label: i8 },
    /// A label or attribute value was outside {-1, +1}.
    InvalidLabel { value: i8 },
    /// A requested joint distribution or parameter set is not realizable.
    InvalidSpec(String),
    /// Configuration violates a documented constraint.
    InvalidConfig(String),
    /// Tensor or batch shape does not match what the operation expects.
    ShapeMismatch(String),
    /// Training failed to reach chance-plus-margin validation accuracy.
    NonConvergence { accuracy: f64, required: f64 },
    /// Frozen model parameters changed underneath an operation.
    FrozenViolation,
    /// A loss became NaN or infinite; training aborted.
    NonFiniteLoss { iteration: usize },
    /// Fewer samples than the operation can work with.
    TooFewSamples { got: usize, need: usize },
    /// Aligned input lists disagree in length.
    LengthMismatch { left: usize, right: usize },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::EmptyInput => write!(f, "empty input: at least one record required"),
            CoreError::EmptyGroup { group } => {
                write!(f, "empty group: no records with z={group}")
            }
            CoreError::EmptyClassWithinGroup { group, label } => {
                write!(f, "empty class within group: no records with z={group}, y={label}")
            }
            CoreError::InvalidLabel { value } => {
                write!(f, "invalid label {value}: labels must be -1 or +1")
            }
            CoreError::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::NonConvergence { accuracy, required } => write!(
                f,
                "non-convergence: validation accuracy {accuracy:.4} below required {required:.4}"
            ),
            CoreError::FrozenViolation => {
                write!(f, "frozen violation: deployed model parameters changed")
            }
            CoreError::NonFiniteLoss { iteration } => {
                write!(f, "non-finite loss at iteration {iteration}")
            }
            CoreError::TooFewSamples { got, need } => {
                write!(f, "too few samples: got {got}, need at least {need}")
            }
            CoreError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
