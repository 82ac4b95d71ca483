use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("forward-mode tangent is not defined for {0}")]
    NoTangentRule(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: malformed content: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("idx: wrong magic {found:#010x} in {path}, expected {expected:#010x}")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("idx: truncated payload in {path}: expected {expected} bytes, found {found}")]
    IdxTruncated { path: PathBuf, expected: usize, found: usize },

    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("unknown training method: {0}")]
    UnknownMethod(String),

    #[error("cannot parse attack spec {0:?}: expected FGSM<k>, PGD<steps>-<k> or CW<steps>-<k>")]
    AttackSpec(String),

    #[error("experiment stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
