use thiserror::Error;

use crate::detcore::ImageId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed json: {0}")]
    MalformedJson(#[from] serde_json::Error),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("box must have positive width and height, got w={w} h={h}")]
    NonPositiveBox { w: f64, h: f64 },
    #[error("unknown image id {0}")]
    UnknownImageId(ImageId),
    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad magic in embedding file")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    VersionMismatch(u32),
    #[error("truncated embedding file: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("embedding sidecar: {0}")]
    Sidecar(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("class has no instances")]
    EmptyClass,
    #[error("negative quality weight {0}")]
    NegativeWeight(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("could not place a negative box after {0} attempts")]
    RetryExhausted(usize),

    #[error("missing embedding for entry {0}")]
    MissingEmbedding(u64),
    #[error("box refiner failed: {0}")]
    RefinerFailure(String),
    #[error("unknown phrase {0:?}")]
    UnknownPhrase(String),

    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
