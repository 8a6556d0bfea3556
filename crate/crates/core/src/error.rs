use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {cause}")]
    Io { path: String, cause: std::io::Error },

    #[error("CSV parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation error in column `{column}`: {message}")]
    Validation { column: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exp overflow at linear index {eta}")]
    Overflow { eta: f64 },

    #[error("mean value {mean} outside the range of the {family} family")]
    MeanOutOfRange { family: &'static str, mean: f64 },

    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("solver diverged: {0}")]
    Divergence(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("working matrix badly conditioned for group {group} (ridge {ridge:e} exceeded cap {cap:e})")]
    BadlyConditioned { group: usize, ridge: f64, cap: f64 },

    #[error("no informative pairs for the correlation estimator")]
    NoInformativePairs,

    #[error("no group has two or more members")]
    NoMultiMemberGroups,

    #[error("SAR system singular or near-singular at rho={rho} (condition estimate {condition:e})")]
    SarSingular { rho: f64, condition: f64 },

    #[error("correlation matrix far from PD (repair changed an entry by {change:.4})")]
    FarFromPd { change: f64 },

    #[error("estimator did not converge: {0}")]
    NotConverged(String),
}

impl Error {
    pub(crate) fn validation(column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            column: column.into(),
            message: message.into(),
        }
    }
}
