//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vote record carried no positive count at all.
    #[error("class '{class_id}': all verb counts are zero")]
    EmptyVotes { class_id: String },

    /// A vote record keyed a verb that is not in the vocabulary.
    #[error("class '{class_id}': verb '{verb}' is not in the vocabulary")]
    UnknownVerb { class_id: String, verb: String },

    /// No verb reached the multi-label threshold; an all-zero ML vector is
    /// untrainable, so this is surfaced instead of silently emitted.
    #[error("class '{class_id}': no verb reaches the ML threshold {threshold}")]
    EmptyLabel { class_id: String, threshold: f64 },

    /// A label vector violated the invariants of its scheme.
    #[error("invalid {scheme} label vector: {reason}")]
    InvalidLabel { scheme: String, reason: String },

    /// Verb index outside the vocabulary.
    #[error("verb index {index} out of range for vocabulary of size {size}")]
    VerbIndexOutOfRange { index: usize, size: usize },

    /// Two aligned collections (or a vector and an expected dimension) disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// A feature vector, parameter, or intermediate value was NaN or infinite.
    #[error("numeric failure in {context}")]
    NumericFailure { context: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: mean loss is not finite")]
    Divergence { epoch: usize },

    /// The requested loss cannot be used with the targets' labelling scheme.
    #[error("loss {loss} is incompatible with {scheme} targets")]
    LossSchemeMismatch { loss: String, scheme: String },

    #[error("duplicate video id '{video_id}'")]
    DuplicateVideoId { video_id: String },

    #[error("no vote record for class '{class_id}'")]
    MissingVotes { class_id: String },

    #[error("fold count must be at least 2, got {fold_count}")]
    InvalidFoldCount { fold_count: usize },

    /// Every video or query was excluded, leaving nothing to average.
    #[error("metric undefined: {reason}")]
    UndefinedMetric { reason: String },

    /// Retrieval corpus is empty after dataset-tag exclusion.
    #[error("corpus is empty after excluding dataset tag '{excluded_tag}'")]
    EmptyCorpus { excluded_tag: String },

    /// A parameter or specification field is out of its documented range.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A structured file failed to parse; `line` is 1-based.
    #[error("malformed file{}: line {line}: {message}", path_suffix(.path))]
    MalformedFile {
        path: Option<String>,
        line: usize,
        message: String,
    },

    /// A file exceeded the configured size guard.
    #[error("file '{path}' is {size} bytes, over the {limit} byte limit")]
    FileTooLarge { path: String, size: u64, limit: u64 },

    /// A loaded model does not match the vocabulary it is used with.
    #[error("model/vocabulary mismatch: {reason}")]
    ModelMismatch { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn path_suffix(path: &Option<String>) -> String {
    match path {
        Some(p) => format!(" '{p}'"),
        None => String::new(),
    }
}

impl Error {
    /// Attach a file path to a `MalformedFile` error produced while parsing
    /// from a reader that did not know its origin.
    pub fn with_path(self, path: impl Into<String>) -> Self {
        match self {
            Error::MalformedFile { line, message, .. } => Error::MalformedFile {
                path: Some(path.into()),
                line,
                message,
            },
            other => other,
        }
    }

    pub(crate) fn malformed(line: usize, message: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: None,
            line,
            message: message.into(),
        }
    }
}
