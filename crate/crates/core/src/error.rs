use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Every importance ratio was `-inf`, so the estimated marginal is zero.
    #[error("all sample points give zero density for record {record:?}")]
    AllImpossible { record: Option<usize> },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("objective or gradient not finite at theta = {theta:?}")]
    NonFiniteObjective { theta: Vec<f64> },

    #[error("profile failed at grid value {value}: {source}")]
    Profile {
        value: f64,
        #[source]
        source: Box<Error>,
    },

    /// Information matrix too ill-conditioned to invert; typically a likelihood ridge.
    #[error(
        "ridge/non-identifiable: information matrix is near singular \
         (smallest eigenvalue {smallest_eigenvalue:e}, condition number {condition:e})"
    )]
    Ridge {
        smallest_eigenvalue: f64,
        condition: f64,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("quadrature is limited to at most one random effect; this model has q = {q} random-effect columns")]
    QuadratureDimension { q: usize },

    #[error("response length T = {t} exceeds the enumeration cap {cap}")]
    EnumerationTooLarge { t: usize, cap: usize },

    #[error("quadrature did not converge under order doubling (relative change {change:e})")]
    QuadratureNotConverged { change: f64 },

    #[error("study failed: {invalid} of {replicates} replicates invalid")]
    StudyFailed { invalid: usize, replicates: usize },
}
