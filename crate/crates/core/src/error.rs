use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Matrix shape as `(rows, cols)`.
pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: non-finite value at position {index}")]
    NonFiniteInput { op: &'static str, index: usize },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid splice offsets {0:?}: must be non-empty and strictly increasing")]
    InvalidSplice(Vec<i32>),

    #[error("semi-orthogonal constraint did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("latent dimension is required for the variational layer")]
    MissingLatentDim,

    #[error("unknown uncertainty mode or variant `{0}`")]
    UnknownMode(String),

    #[error("graph has no accepting path for the given scores")]
    NoAcceptingPath,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("bigram row {row} is not normalized (logsumexp = {lse})")]
    UnnormalizedBigram { row: String, lse: f64 },

    #[error("empty alignment")]
    EmptyAlignment,

    #[error("label {label} out of range for {labels} output labels")]
    LabelOutOfRange { label: usize, labels: usize },

    #[error("empty reference sequence")]
    EmptyReference,

    #[error("non-finite objective term `{term}`")]
    NonFinite { term: &'static str },

    #[error("topology mismatch in layers {layers:?}")]
    TopologyMismatch { layers: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt or unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("corrupt or unsupported corpus file: {0}")]
    Corpus(String),

    #[error("invalid corpus spec: {0}")]
    CorpusSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::Shape { op, left, right }
    }
}
