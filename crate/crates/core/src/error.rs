use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("cosine similarity undefined: row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("function is not deterministic: two evaluations gave {first:e} and {second:e}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("voxel count mismatch: dims {dims:?} declare {declared} voxels, payload holds {actual}")]
    CountMismatch {
        dims: [u32; 3],
        declared: usize,
        actual: usize,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("empty reader score list")]
    EmptyScores,

    #[error("reader score {0} outside [1, 5]")]
    ScoreOutOfRange(u8),

    #[error("label {label} has {count} entries; stratified splitting needs at least 3")]
    TooFewToStratify { label: u8, count: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("fine-tune sample `{0}` also appears in the test set")]
    Leakage(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("attribution: {0}")]
    Attribution(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
