use crate::solvers::SolveStats;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("matrix is not positive definite: pivot {index} is {pivot:e}")]
    Singular { index: usize, pivot: f64 },

    #[error("constraint Jacobian is rank deficient: smallest Gram pivot {pivot:e} (threshold {threshold:e})")]
    SingularProjection { pivot: f64, threshold: f64 },

    #[error("retraction did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("integration diverged at step {step}, stage {stage}")]
    Divergence { step: usize, stage: usize },

    #[error("step size underflow at t = {t} (h = {h:e}); problem is stiff ({stats})")]
    Stiffness { t: f64, h: f64, stats: SolveStats },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged in {phase} epoch {epoch}, batch {batch}")]
    Training {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
