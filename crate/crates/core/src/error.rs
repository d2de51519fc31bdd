use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("cannot pool shape {shape:?} by factor {factor}")]
    DegeneratePool { shape: [usize; 3], factor: usize },

    #[error("mask is not binary at voxel {index} (value {value})")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("affine matrix is not invertible (|det| = {0:e})")]
    SingularAffine(f64),

    #[error("invalid affine matrix: {0}")]
    InvalidAffine(String),

    #[error("matrix logarithm undefined: {0}")]
    NoLogarithm(String),

    #[error("malformed magic in {0}")]
    MalformedMagic(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported file layout: {0}")]
    UnsupportedLayout(String),

    #[error("predictor is not inverse consistent (residual {residual:e})")]
    NotInverseConsistent { residual: f64 },

    #[error("expected {expected} children, got {found}")]
    WrongArity { expected: usize, found: usize },

    #[error("unknown leaf index {0}")]
    UnknownLeaf(usize),

    #[error("unsupported stack topology: {0}")]
    UnsupportedTopology(String),

    #[error("non-finite loss for pair {pair}")]
    NonFiniteLoss { pair: usize },

    #[error("registration failed for subject {subject}: {message}")]
    RegistrationFailed { subject: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid preprocessing plan: {0}")]
    InvalidPlan(String),

    #[error("missing atlas for alignment")]
    MissingAtlas,

    #[error("missing imported transform for nonparametric alignment")]
    MissingTransform,

    #[error("degenerate crop box {0:?}")]
    DegenerateCrop([f64; 6]),

    #[error("feature tensor rank {0} < 2")]
    RankTooLow(usize),

    #[error("payload length mismatch: metadata implies {expected} values, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("missing feature record {0}")]
    MissingRecord(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid pair: {0}")]
    InvalidPair(String),

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("missing csv column '{0}'")]
    MissingColumn(String),

    #[error("duplicate record {0}")]
    DuplicateKey(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("need >= 2 classes, found {0}")]
    TooFewClasses(usize),

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}
