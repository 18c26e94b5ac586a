//! Crate-wide error type and result alias.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// `backward` was asked to differentiate a non-scalar output.
    NonScalarOutput(Vec<usize>),
    /// A layer name did not resolve against the architecture spec.
    UnknownLayer(String),
    /// Training produced a non-finite loss.
    Divergence { epoch: usize, step: usize, loss: f64 },
    /// A config, spec file, or CLI argument failed validation.
    Validation(String),
    /// A verification run (gradient check) failed its threshold.
    Verification(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarOutput(shape) => {
                write!(f, "backward requires a scalar output, got shape {shape:?}")
            }
            Error::UnknownLayer(name) => write!(f, "unknown layer: {name}"),
            Error::Divergence { epoch, step, loss } => write!(
                f,
                "training diverged at epoch {epoch}, step {step}: loss = {loss}"
            ),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Verification(msg) => write!(f, "verification failed: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
