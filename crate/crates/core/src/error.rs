use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor did not have the shape an operation expected.
    ShapeMismatch {
        expected: crate::Shape,
        got: crate::Shape,
    },
    /// A buffer length disagrees with the shape it is paired with.
    LengthMismatch { expected: usize, got: usize },
    StageOutOfRange { stage: usize, stages: usize },
    TimeOutOfRange(f64),
    /// Two times that must share a stage do not.
    CrossStage { s: f64, t: f64 },
    InvalidArgument(String),
    /// A patch is smaller than one element at the requested stage.
    ResolutionLimit { stage: usize, extent: usize },
    EmptyDataset,
    /// A full-noise complement was requested a second time in one trajectory.
    NoiseConsumed { boundary: usize },
    UnregisteredStage { stage: usize },
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::LengthMismatch { expected, got } => {
                write!(f, "buffer length {got} does not match expected {expected}")
            }
            Error::StageOutOfRange { stage, stages } => {
                write!(f, "stage {stage} out of range (stack has {stages} stages)")
            }
            Error::TimeOutOfRange(t) => write!(f, "time {t} outside [0, 1]"),
            Error::CrossStage { s, t } => {
                write!(f, "times {s} and {t} lie in different stages")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ResolutionLimit { stage, extent } => write!(
                f,
                "patch of extent {extent} is below one element at stage {stage}"
            ),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::NoiseConsumed { boundary } => {
                write!(f, "full-noise complement for boundary {boundary} already used")
            }
            Error::UnregisteredStage { stage } => {
                write!(f, "no adapter registered for stage {stage}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
