use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite latent")]
    NonFiniteLatent,
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("erosion op {op} invalid for resolution {height}x{width}")]
    InvalidErosion { op: String, height: usize, width: usize },
    #[error("resolution {height}x{width} too small for variant {variant}")]
    ResolutionTooSmall { variant: String, height: usize, width: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("batch size {batch} exceeds split size {available}")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("unknown tensor {0}")]
    UnknownTensor(String),
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("checkpoint format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("all AUROCs undefined")]
    AurocUndefined,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("missing labels")]
    MissingLabels,
}

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Display, actual: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
