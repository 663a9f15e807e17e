use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported language code `{code}` (supported: {supported})")]
    UnsupportedLanguage { code: String, supported: String },

    #[error("invalid sentence pair: {0}")]
    InvalidPair(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample size {k} exceeds corpus size {available}")]
    SampleTooLarge { k: usize, available: usize },

    #[error("vocab_size {requested} is below the minimum of {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid lora config: {0}")]
    InvalidLora(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bleu: {0}")]
    Bleu(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::UnsupportedLanguage { .. } => "unsupported_language",
            Error::InvalidPair(_) => "invalid_pair",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SampleTooLarge { .. } => "sample_too_large",
            Error::VocabTooSmall { .. } => "vocab_too_small",
            Error::UnknownToken(_) => "unknown_token",
            Error::Parse { .. } => "parse",
            Error::InvalidConfig(_) => "invalid_config",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::EmptyMask => "empty_mask",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::InvalidLora(_) => "invalid_lora",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Bleu(_) => "bleu",
            Error::Prompt(_) => "prompt",
            Error::Locked(_) => "locked",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
