use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains non-finite components")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding space mismatch: {left} vs {right}")]
    SpaceMismatch { left: String, right: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to decode image {path}: {message}")]
    DecodeFailure { path: String, message: String },
    #[error("backend failure: {0}")]
    BackendFailure(String),
    #[error("tokenize failure: {0}")]
    TokenizeFailure(String),
    #[error("no images found under {0}")]
    NoImagesFound(PathBuf),
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error("unsupported cache version {0}")]
    VersionUnsupported(u32),
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid thresholds: negative {negative} > positive {positive}")]
    InvalidThresholds { negative: f64, positive: f64 },
    #[error("rating {0} outside [1, 5]")]
    RatingOutOfRange(f64),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("parse failure at row {row}: {message}")]
    ParseFailure { row: usize, message: String },
    #[error("too few examples: {0}")]
    TooFewExamples(String),
    #[error("prediction and ground-truth ids differ: {0}")]
    IdMismatch(String),
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("embeddings missing for {} ids (first: {})", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingEmbeddings(Vec<String>),

    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("optimization diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("singular problem: {0}")]
    SingularProblem(String),
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
