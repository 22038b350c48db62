use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("invalid token id {0}")]
    InvalidId(usize),
    #[error("invalid inventory: {0}")]
    InvalidInventory(String),

    #[error("input of length {len} is shorter than the receptive field {field}")]
    InputTooShort { len: usize, field: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector in {0}")]
    ZeroNormVector(&'static str),
    #[error("not enough masked frames for distractor sampling ({0})")]
    NotEnoughFrames(usize),
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("blank cannot extend a label prefix")]
    InvalidExtension,
    #[error("decoder state mismatch: {0}")]
    StateMismatch(String),
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("token {0} is not valid here")]
    InvalidToken(usize),
    #[error("language model corpus is empty")]
    EmptyCorpus,

    #[error("invalid decode weights: {0}")]
    InvalidWeights(String),

    #[error("every training utterance was filtered out")]
    AllUtterancesFiltered,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("invalid config: key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("subset target {target:.3} s exceeds total duration {total:.3} s")]
    TargetTooLarge { target: f64, total: f64 },
    #[error("duplicate utterance id {0}")]
    DuplicateId(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{path}: {source}")]
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

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonScalarRoot(_) => "NonScalarRoot",
            Error::UnknownSymbol(_) => "UnknownSymbol",
            Error::InvalidId(_) => "InvalidId",
            Error::InvalidInventory(_) => "InvalidInventory",
            Error::InputTooShort { .. } => "InputTooShort",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ZeroNormVector(_) => "ZeroNormVector",
            Error::NotEnoughFrames(_) => "NotEnoughFrames",
            Error::InvalidCodebook(_) => "InvalidCodebook",
            Error::InvalidExtension => "InvalidExtension",
            Error::StateMismatch(_) => "StateMismatch",
            Error::EmptyTarget => "EmptyTarget",
            Error::InvalidToken(_) => "InvalidToken",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::InvalidWeights(_) => "InvalidWeights",
            Error::AllUtterancesFiltered => "AllUtterancesFiltered",
            Error::CheckpointMismatch(_) => "CheckpointMismatch",
            Error::Config { .. } => "Config",
            Error::TargetTooLarge { .. } => "TargetTooLarge",
            Error::DuplicateId(_) => "DuplicateId",
            Error::Format { .. } => "Format",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }
}
