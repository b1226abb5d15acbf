use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: non-finite reward")]
    NonFiniteReward { line: usize },

    #[error("malformed document: {0}")]
    MalformedDocument(String),

    #[error("unknown prompt '{0}'")]
    UnknownPrompt(String),

    #[error("unknown response '{response}' for prompt '{prompt}'")]
    UnknownResponse { prompt: String, response: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("featurized policy requested but the prompt space carries no features")]
    MissingFeatures,

    #[error("policy class mismatch: expected {expected}, found {found}")]
    ClassMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("reference policy assigns zero probability to '{response}' under prompt '{prompt}'")]
    ZeroReferenceProbability { prompt: String, response: String },

    #[error("no reward for response '{response}' under prompt '{prompt}'")]
    MissingReward { prompt: String, response: String },

    #[error("conflicting rewards for ('{prompt}', '{response}'): {first} vs {second}")]
    ConflictingReward {
        prompt: String,
        response: String,
        first: f64,
        second: f64,
    },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero entry at index {0} of the second distribution")]
    ZeroProbability(usize),

    #[error("non-finite loss evaluation")]
    NonFiniteEvaluation,

    #[error("non-finite gradient at coordinate {0}")]
    NonFiniteGradient(usize),

    #[error("record index {index} out of range for dataset of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("partition estimate does not match: {0}")]
    MismatchedEstimate(String),

    #[error("oracle inputs do not match: {0}")]
    MismatchedOracle(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no record qualifies (reward >= {threshold})")]
    NoQualifyingRecords { threshold: f64 },

    #[error("step {step} exceeds total {total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("{method} diverged at step {step}: loss = {loss}")]
    Divergence {
        method: String,
        step: u64,
        loss: f64,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u64 },

    #[error("prompt space digest mismatch: checkpoint {expected}, space {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("metric schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a file does not belong to the inputs it
    /// was loaded against.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::VersionMismatch { .. } | Error::DigestMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
