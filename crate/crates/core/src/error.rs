use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid row {row} is not sorted in nondecreasing order")]
    UnsortedRow { row: usize },

    #[error("grid needs at least 2 columns, got {0}")]
    TooFewColumns(usize),

    #[error("unit weights are all zero")]
    ZeroWeights,

    #[error("quantile level {0} is outside (0, 1)")]
    QuantileLevel(f64),

    #[error("weighted Gram matrix is singular")]
    Singular,

    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("fluctuation parameter optimization failed at iteration {iteration}: {reason}")]
    Fluctuation { iteration: usize, reason: String },

    #[error("fold {0} is empty")]
    EmptyFold(usize),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

/// Non-fatal conditions reported next to an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// The estimating equation never changed sign; the largest candidate was returned.
    NoSignChange,
    /// Inverse weights sum to less than `q * n`.
    InsufficientWeight,
    /// Density estimate hit its floor.
    DensityFloor,
    /// Influence function has zero spread; the interval is a point.
    DegenerateInterval,
    /// Logistic fit separated the data.
    Separation,
    /// Iterative solver stopped at its iteration cap.
    IterationCap,
}
