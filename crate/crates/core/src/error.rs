use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("centered covariance is rank deficient (smallest eigenvalue {smallest_eigenvalue:e}, largest {largest_eigenvalue:e})")]
    RankDeficient {
        smallest_eigenvalue: f64,
        largest_eigenvalue: f64,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degree {degree} exceeds configured cap {cap}")]
    DegreeTooLarge { degree: usize, cap: usize },
    #[error("base size {size} exceeds maximum {max}")]
    SizeTooLarge { size: usize, max: usize },
    #[error("partition base mismatch: expected {expected}, found {found}")]
    BaseMismatch { expected: usize, found: usize },
    #[error("population size {n} is below the minimum {min}")]
    PopulationTooSmall { n: usize, min: usize },
    #[error("weight cache entry is corrupt: {0}")]
    CacheCorrupt(String),
    #[error("arm {arm} covariance is singular (smallest eigenvalue {smallest_eigenvalue:e})")]
    SingularArmCovariance { arm: u8, smallest_eigenvalue: f64 },
    #[error("arm {arm} has {size} units, need at least {required}")]
    ArmTooSmall {
        arm: u8,
        size: usize,
        required: usize,
    },
    #[error("weight vector for arm {arm} was computed with m={found}, arm size is {expected}")]
    WeightArmMismatch {
        arm: u8,
        expected: usize,
        found: usize,
    },
    #[error("enumeration needs {required} evaluations, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },
    #[error("worst-case residual direction is degenerate")]
    DegenerateDirection,
    #[error("sigma_n^2 = {0:e} is not positive")]
    NonPositive(f64),
    #[error("component with a vertex of degree {0} cannot be contracted with pairwise factors")]
    UnsupportedComponent(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Dimension(_) => "dimension",
            Error::DegreeTooLarge { .. } => "degree_too_large",
            Error::SizeTooLarge { .. } => "size_too_large",
            Error::BaseMismatch { .. } => "base_mismatch",
            Error::PopulationTooSmall { .. } => "population_too_small",
            Error::CacheCorrupt(_) => "cache_corrupt",
            Error::SingularArmCovariance { .. } => "singular_arm_covariance",
            Error::ArmTooSmall { .. } => "arm_too_small",
            Error::WeightArmMismatch { .. } => "weight_arm_mismatch",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::DegenerateDirection => "degenerate_direction",
            Error::NonPositive(_) => "non_positive",
            Error::UnsupportedComponent(_) => "unsupported_component",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
