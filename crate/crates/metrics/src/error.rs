use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    /// Too few items to evaluate (empty sets, lone nodes, length mismatches).
    #[error("{0}")]
    Arity(String),
    /// Input exceeds the exact-search size budget.
    #[error("{0}")]
    Size(String),
    #[error(transparent)]
    Graph(#[from] gsdiff_graph::GraphError),
}

pub type MetricsResult<T> = Result<T, MetricsError>;
