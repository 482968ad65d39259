use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset:\n{0}")]
    Validation(ValidationReport),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate control variance for {0}")]
    DegenerateVariance(String),

    #[error("collinear design columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("logistic response has a single class")]
    SingleClass,

    #[error("no model spec for required target {0}")]
    MissingSpec(String),

    #[error("unknown covariate column `{0}`")]
    UnknownColumn(String),

    #[error("empty treatment arm: {0}")]
    EmptyArm(String),

    #[error("stratum {0} is missing a treatment arm")]
    EmptyStratum(String),

    #[error("grid does not bracket quantile {0}")]
    GridDoesNotBracket(f64),

    #[error("zero interquartile range for {0}")]
    ZeroIqr(String),

    #[error("nonpositive density estimate at {0}")]
    NonPositiveDensity(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("zero contrast variance for pair ({0}, {1})")]
    ZeroContrastVariance(String, String),

    #[error("too many failed replicates: {failed} of {total}")]
    ReplicateFailures { failed: usize, total: usize },
}

impl Error {
    /// Numerical failures (as opposed to bad input) get their own exit code in the CLI.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateVariance(_)
                | Error::RankDeficient(_)
                | Error::Singular(_)
                | Error::ZeroIqr(_)
                | Error::NonPositiveDensity(_)
                | Error::ZeroContrastVariance(..)
                | Error::GridDoesNotBracket(_)
                | Error::ReplicateFailures { .. }
        )
    }
}
