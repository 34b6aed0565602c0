//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, D2cError>;

#[derive(Debug, Error)]
pub enum D2cError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    #[error("degenerate latent: {0}")]
    DegenerateLatent(String),

    #[error("non-finite loss in component `{0}`")]
    NonFiniteLoss(String),

    #[error("non-finite output in `{0}`")]
    NonFiniteOutput(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("parameter table mismatch: {0}")]
    TableMismatch(String),

    #[error("classifier input contains a single class")]
    SingleClassInput,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("acceptance starvation: rate {rate:.2e} after {candidates} candidates")]
    AcceptanceStarvation { rate: f64, candidates: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("indefinite covariance: eigenvalue {0:.3e} below tolerance")]
    IndefiniteCovariance(f64),

    #[error("quadrature failed to converge: {0}")]
    QuadratureNonConvergence(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("truncated payload: declared {declared} items, payload holds {actual}")]
    TruncatedPayload { declared: usize, actual: usize },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
