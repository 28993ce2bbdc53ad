use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate (zero-norm) vector in {op}")]
    Degenerate { op: &'static str },
    #[error("backward: {0}")]
    Backward(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("could not sample a sentence pair after {attempts} attempts: {reason}")]
    ResampleExhausted { attempts: usize, reason: String },
    #[error("sequence has no maskable (non-special) tokens")]
    Unmaskable,
    #[error("example of length {len} exceeds max_len {max_len}")]
    Overlong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("no positions selected for prediction")]
    NoSelectedPositions,
    #[error("config validation failed for keys: {}", .keys.join(", "))]
    Config { keys: Vec<String>, messages: Vec<String> },
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Stable machine-readable kind, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Degenerate { .. } => "degenerate",
            Error::Backward(_) => "backward",
            Error::Invalid(_) => "invalid_argument",
            Error::EmptyCorpus => "empty_corpus",
            Error::ResampleExhausted { .. } => "resample_exhausted",
            Error::Unmaskable => "unmaskable",
            Error::Overlong { .. } => "overlong",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::NoSelectedPositions => "no_selected_positions",
            Error::Config { .. } => "config",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
