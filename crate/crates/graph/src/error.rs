use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("coordinate out of range in {op}: {msg}")]
    Range { op: &'static str, msg: String },
    #[error("node count exceeds {max}: got {got}")]
    Capacity { max: usize, got: usize },
    #[error("parse error: {msg}")]
    Parse { msg: String },
    #[error("unsupported schema version {got}, expected {expected}")]
    Version { got: u32, expected: u32 },
    #[error("topology error: {msg}")]
    Topology { msg: String },
    #[error("cycle error: {msg}")]
    Cycle { msg: String },
    #[error("generation error: {msg}")]
    Generation { msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type GraphResult<T> = Result<T, GraphError>;
