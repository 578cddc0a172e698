use std::fmt;

/// Result alias used throughout the differentiable core.
pub type DiffResult<T> = Result<T, DiffError>;

/// Errors emitted by tensor operations, the tape, and the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub enum DiffError {
    /// Operands of an op have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Constructor data length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// An op was configured with invalid hyper-parameters (bad stride,
    /// non-positive output extent, invalid axis, ...).
    InvalidConfig { op: &'static str, message: String },
    /// A sample point fell outside the field and border padding was off.
    OutOfBounds {
        point_index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    /// A gradient or update became non-finite during training.
    NonFinite { what: String },
    /// Checkpoint file is malformed or does not match the model.
    Checkpoint { message: String },
    /// Wrapper around I/O failures when persisting tensors.
    Io { message: String },
}

impl fmt::Display for DiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            DiffError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape ({expected} expected)")
            }
            DiffError::InvalidConfig { op, message } => write!(f, "{op}: {message}"),
            DiffError::OutOfBounds { point_index, x, y, width, height } => write!(
                f,
                "sample point {point_index} at ({x}, {y}) outside {width}x{height} field and border padding is off"
            ),
            DiffError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            DiffError::Checkpoint { message } => write!(f, "checkpoint: {message}"),
            DiffError::Io { message } => write!(f, "io: {message}"),
        }
    }
}

impl std::error::Error for DiffError {}

impl From<std::io::Error> for DiffError {
    fn from(e: std::io::Error) -> Self {
        DiffError::Io { message: e.to_string() }
    }
}
