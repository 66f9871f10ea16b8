use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("data length {len} does not match shape [{rows}, {cols}]")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("invalid argument to {op}: {msg}")]
    Argument { op: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("element {element} repeats node {node}")]
    DegenerateElement { element: usize, node: usize },
    #[error("element {element} references node {node} but the mesh has {n_nodes} nodes")]
    NodeOutOfRange {
        element: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("array `{name}` has length {len}, expected {expected}")]
    Length {
        name: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("unknown node type code {0}")]
    NodeType(i64),
    #[error("unsupported spatial dimension {0} (expected 2 or 3)")]
    Dimension(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not an MGNTARR1 container")]
    Magic,
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("array `{name}`: expected {expected}, found {found}")]
    Type {
        name: String,
        expected: String,
        found: String,
    },
    #[error("duplicate array name `{0}`")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("failed to parse config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("training aborted at step {step}: {reason} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    TrainingAbort {
        step: usize,
        reason: String,
        lr: f64,
        grad_norm: f64,
    },
    #[error("rollout aborted at step {step}: {reason}")]
    RolloutAbort { step: usize, reason: String },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
