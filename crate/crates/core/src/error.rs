use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}{}: {detail}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    ShapeMismatch {
        op: &'static str,
        node: Option<usize>,
        detail: String,
    },

    #[error("input node {0} is not bound")]
    UnboundInput(usize),

    #[error("backward called before forward: node {0} has no value")]
    BackwardBeforeForward(usize),

    #[error("cost node {node} is not scalar (shape {shape:?})")]
    NonScalarCost { node: usize, shape: Vec<usize> },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("distribution undefined: context has never been observed")]
    UnseenContext,

    #[error("non-finite {what} encountered")]
    NonFinite { what: &'static str },

    #[error("singular system in {0}; consider enabling ridge jitter")]
    Singular(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("line counts differ: {left} vs {right}")]
    LineCountMismatch { left: usize, right: usize },

    #[error("unsupported checkpoint format: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            node: None,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the id of the node being evaluated to a shape error.
    pub(crate) fn at_node(self, id: usize) -> Self {
        match self {
            Error::ShapeMismatch { op, detail, .. } => Error::ShapeMismatch {
                op,
                node: Some(id),
                detail,
            },
            other => other,
        }
    }
}
