use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateMask { row: usize },
    #[error("non-finite value in {op}: {msg}")]
    NonFinite { op: &'static str, msg: String },
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {msg}")]
    CheckpointFormat { msg: String },
}

pub type TensorResult<T> = Result<T, TensorError>;
