use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },

    #[error("backward needs a single-element output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("replay expected {expected} leaf tensors, got {got}")]
    LeafCount { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("classes {c} and {i} share an identical weight row and bias; their boundary is degenerate")]
    DegenerateBoundary { c: usize, i: usize },

    #[error("classes {c} and {i} share a weight row but differ in bias; their boundary is empty")]
    EmptyBoundary { c: usize, i: usize },

    #[error("no centroid for class {0}")]
    MissingCentroid(usize),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("perturbation `{variant}` needs grid input, got shape {shape:?}")]
    NeedsGrid { variant: &'static str, shape: Vec<usize> },

    #[error("dataset file: magic mismatch (found {found:?})")]
    BadMagic { found: [u8; 4] },

    #[error("dataset file: malformed header: {0}")]
    MalformedHeader(String),

    #[error("dataset file: payload length mismatch (expected {expected} bytes, found {found})")]
    LengthMismatch { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
