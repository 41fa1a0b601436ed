use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite value produced by {layer}")]
    Numeric { layer: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("graph validation failed at nodes {nodes:?}: {detail}")]
    Validation { nodes: Vec<usize>, detail: String },

    #[error("unresolved dependency: node {node} ({name}) reads tensor {tensor} with no producer")]
    UnresolvedDependency {
        node: usize,
        name: String,
        tensor: usize,
    },

    #[error("model inconsistency: {0}")]
    Inconsistent(String),

    #[error("pruning refused: {0}")]
    PruneRefused(String),

    #[error("budget of {budget} channels cannot be placed: every group is at its channel floor")]
    BudgetUnplaceable { budget: usize },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },

    #[error("unsupported layer kind `{kind}` at byte {offset}")]
    UnsupportedKind { kind: String, offset: usize },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    /// Attach node context to an error raised inside a layer kernel.
    pub(crate) fn in_node(self, name: &str) -> Self {
        match self {
            Error::Shape { layer, detail } if layer.is_empty() || layer == "?" => Error::Shape {
                layer: name.to_string(),
                detail,
            },
            Error::Numeric { layer } if layer.is_empty() || layer == "?" => Error::Numeric {
                layer: name.to_string(),
            },
            other => other,
        }
    }
}
