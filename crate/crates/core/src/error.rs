use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("index out of vocabulary: {index} (size {size})")]
    IndexOutOfVocabulary { index: usize, size: usize },
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
    #[error("text overflow: {chars} characters need {needed}px at the minimum font size, image width is {width}px")]
    TextOverflow {
        chars: usize,
        needed: usize,
        width: usize,
    },
    #[error("invalid fiducial count {0}: must be even and at least 6")]
    FiducialCount(usize),
    #[error("degenerate fiducials: {0}")]
    DegenerateFiducials(String),
    #[error("invalid task weights: {0}")]
    InvalidTaskWeights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("length mismatch: {hypotheses} hypotheses vs {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("empty reference")]
    EmptyReference,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("datasets do not match training mode: {0}")]
    DatasetMode(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Record {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
