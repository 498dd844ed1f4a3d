use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),

    #[error("{op}: index {index} out of range for {len}")]
    OutOfRange { op: &'static str, index: usize, len: usize },

    #[error("{op}: expected at most rank 2, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,

    #[error("loss is not connected to any tensor that requires a gradient")]
    Detached,

    #[error("variable {0} does not belong to this graph")]
    ForeignVar(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
