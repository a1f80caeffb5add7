use gsdiff_graph::GraphError;
use gsdiff_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("training: {0}")]
    Train(String),

    /// Input so degenerate the forward pass has nothing to attend to
    /// (for example a node set with every slot marked background).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("metadata encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

pub type ModelResult<T> = Result<T, ModelError>;
