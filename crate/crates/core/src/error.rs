use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid spectrum `{id}`: {reason}")]
    InvalidSpectrum { id: String, reason: String },

    #[error("empty spectrum `{0}`: no peaks remain")]
    EmptySpectrum(String),

    #[error("load error in {source_name}: {message}")]
    Load { source_name: String, message: String },

    #[error("invalid acquisition: {0}")]
    InvalidAcquisition(String),

    #[error("no sample detected: max slope {max_slope:e} does not exceed flatness threshold {threshold:e}")]
    NoSampleDetected { max_slope: f64, threshold: f64 },

    #[error("insufficient background: need at least 3 background points, bg_end = {0}")]
    InsufficientBackground(usize),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimizer error: non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate embedding at row {0}: zero norm")]
    DegenerateEmbedding(usize),

    #[error("dataset too small: {have} pairs, need at least {need}")]
    DatasetTooSmall { have: usize, need: usize },

    #[error("vocabulary does not cover observed m/z values: {0:?}")]
    UncoveredMz(Vec<u32>),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
