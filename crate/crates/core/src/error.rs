use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("basis matrix is rank deficient (smallest/largest singular value {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("component index {index} out of range for {len} components")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("cache does not match network: {0}")]
    StaleCache(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("horizon {horizon} s outside trajectory range [{start}, {end}] s")]
    HorizonOutOfRange { horizon: f64, start: f64, end: f64 },
    #[error("predictor {0} is not registered")]
    UnknownPredictor(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("trajectories are not sampled on a common grid")]
    GridMismatch,
    #[error("list is empty")]
    EmptyList,
    #[error("models differ in more than one child: {0}")]
    MismatchedChildSets(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("non-finite training loss at epoch {epoch}")]
    NaNLoss { epoch: usize },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidFractions(_) | Error::MissingCheckpoint(_) => 2,
            Error::NaNLoss { .. }
            | Error::RankDeficient { .. }
            | Error::NonPositiveStd(_) => 4,
            _ => 3,
        }
    }
}
