use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: String },
    #[error("fewer than 2 distinct treatments found")]
    TooFewTreatments,
    #[error("treatment group {label} has only {size} units; at least {required} required")]
    GroupTooSmall {
        label: String,
        size: usize,
        required: usize,
    },
    #[error("column {0} has more than {1} distinct values; treat it as continuous")]
    TooManyLevels(usize, usize),
    #[error("column index {0} out of range (dataset has {1} covariates)")]
    ColumnOutOfRange(usize, usize),
    #[error("invalid treatment label {0}")]
    InvalidLabel(usize),
    #[error("GPS fit did not converge after {iterations} iterations (gradient max-norm {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("perfect separation suspected: coefficient max-norm {0:.3e} diverged")]
    Separation(f64),
    #[error("eta must lie in (0, 0.5); got {0}")]
    InvalidEta(f64),
    #[error("alpha must lie in (0, 1); got {0}")]
    InvalidAlpha(f64),
    #[error("cluster count must be at least 1")]
    InvalidClusterCount,
    #[error("pooled covariate covariance is singular (smallest eigenvalue {0:.3e})")]
    SingularCovariance(f64),
    #[error("effect covariance is singular (smallest eigenvalue {0:.3e})")]
    SingularEffectCovariance(f64),
    #[error("design matrix is rank deficient (rank {rank} of {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("missing match set for unit {unit}, target group {group}")]
    MissingMatches { unit: usize, group: usize },
    #[error("missing within-group match sets; run within-group matching first")]
    MissingWithinMatches,
    #[error("n_t must be at least 2 for the randomization-based variance (got {0})")]
    ReferenceTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("missing estimate for reference group {0}")]
    MissingReference(usize),
    #[error("covariance matrix for the simulation factors is not positive definite")]
    NotPositiveDefinite,
    #[error("{0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
