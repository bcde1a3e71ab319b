use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: label {label} out of range for {classes} classes")]
    Index {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MoeError {
    #[error("invalid routing configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error("graph has a cycle through node {node}")]
    Cycle { node: usize },
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("invalid capacity configuration for block {block}: {detail}")]
    Capacity { block: usize, detail: String },
    #[error("unsupported recompile edit: {0}")]
    UnsupportedEdit(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("metric queue `{0}`: resolve on an empty queue")]
    EmptyQueue(String),
    #[error("metric queue `{queue}`: expected iteration {expected}, got {got}")]
    OutOfOrder {
        queue: String,
        expected: u64,
        got: u64,
    },
    #[error("trigger `{name}` failed at iteration {iteration}: {message}")]
    Trigger {
        name: String,
        iteration: u64,
        message: String,
    },
    #[error("task {task} ({kind}) failed: {message}")]
    Task {
        task: u64,
        kind: String,
        message: String,
    },
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: u64 },
    #[error("executor internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
