use std::path::PathBuf;

/// Errors produced anywhere in the colorization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("image sizes differ: {a:?} vs {b:?}")]
    SizeMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("contrastive loss needs at least one negative embedding")]
    EmptyNegatives,

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("embedding has zero norm")]
    ZeroVector,

    #[error("non-finite loss at step {step} (ldm={ldm}, cst={cst})")]
    NonFiniteLoss { step: usize, ldm: f64, cst: f64 },

    #[error("frozen component changed during training: {0}")]
    BackendFrozenViolation(String),

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("object spans overlap at characters {0}..{1}")]
    OverlappingSpans(usize, usize),

    #[error("span {start}..{end} is outside a prompt of {len} characters")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("unknown object word: {0:?}")]
    UnknownObject(String),

    #[error("interpolation weight {0} outside [0, 1]")]
    EtaOutOfRange(f64),

    #[error("edit session is incomplete: {0}")]
    SessionIncomplete(String),

    #[error("image side {side} is smaller than the {window}-pixel window")]
    TooSmall { side: usize, window: usize },

    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("missing counterpart for {0}")]
    MissingPair(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }
}
