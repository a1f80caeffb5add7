use std::fmt;

use gsdiff_graph::GraphError;
use gsdiff_metrics::MetricsError;
use gsdiff_model::ModelError;

/// Command failures, bucketed by exit code: config 2, dependency 3,
/// numeric 4. Dependency covers everything the invocation needed but could
/// not get: missing artifacts, unreadable or unwritable files, corrupt
/// inputs produced by an earlier stage.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Dependency(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }

    pub fn dependency(msg: impl Into<String>) -> CliError {
        CliError::Dependency(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {}", msg),
            CliError::Dependency(msg) => write!(f, "dependency error: {}", msg),
            CliError::Numeric(msg) => write!(f, "numeric error: {}", msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            ModelError::DegenerateInput(m) => CliError::Config(m),
            ModelError::Train(m) => CliError::Numeric(m),
            ModelError::Io(io) => CliError::Dependency(io.to_string()),
            ModelError::Graph(g) => CliError::from(g),
            ModelError::Tensor(t) => CliError::Numeric(t.to_string()),
            ModelError::Encoding(m) => CliError::Dependency(m.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> CliError {
        match e {
            GraphError::Parse { .. } | GraphError::Version { .. } | GraphError::Io(_) => {
                CliError::Dependency(e.to_string())
            }
            GraphError::Range { .. }
            | GraphError::Capacity { .. }
            | GraphError::Topology { .. }
            | GraphError::Cycle { .. }
            | GraphError::Generation { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        match e {
            MetricsError::Arity(m) | MetricsError::Size(m) => CliError::Config(m),
            MetricsError::Graph(g) => CliError::from(g),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Dependency(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach the file behind an IO-ish failure so dependency errors name the
/// artifact that was missing or unreadable.
pub trait PathContext<T> {
    fn at_path(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T, E: Into<CliError>> PathContext<T> for Result<T, E> {
    fn at_path(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| match e.into() {
            CliError::Config(m) => CliError::Config(format!("{}: {}", path.display(), m)),
            CliError::Dependency(m) => {
                CliError::Dependency(format!("{}: {}", path.display(), m))
            }
            CliError::Numeric(m) => CliError::Numeric(format!("{}: {}", path.display(), m)),
        })
    }
}
