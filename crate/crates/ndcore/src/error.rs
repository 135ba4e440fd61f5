use thiserror::Error;

/// Errors raised by array construction, tensor kernels and the gradient tape.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backprop: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backprop: parameter `{0}` is not on the tape")]
    UnknownParam(String),
    #[error("optimizer: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("ndt: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NdError> = std::result::Result<T, E>;

impl NdError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        NdError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
