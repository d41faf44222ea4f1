use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("outcome present/absent inconsistently with response indicator at row {0}")]
    OutcomePresenceViolation(usize),

    #[error("no respondents in dataset")]
    EmptyRespondentSet,

    #[error("non-finite basis value at row {row}, column {column}")]
    NonFiniteBasisValue { row: usize, column: usize },

    #[error("invalid basis specification: {0}")]
    InvalidBasis(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("complete or quasi-complete separation detected (|phi| > {limit})")]
    SeparationDetected { limit: f64 },

    #[error("singular Hessian in {0}")]
    SingularHessian(&'static str),

    #[error("singular Jacobian in {0}")]
    SingularJacobian(&'static str),

    #[error("singular normal equations")]
    SingularNormalEquations,

    #[error("singular linear system in {context} (condition number {condition:e})")]
    SingularSystem { context: &'static str, condition: f64 },

    #[error("{solver} did not converge within {iterations} iterations (residual {residual:e})")]
    MaxIterationsExceeded {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("calibration objective is unbounded below")]
    Unbounded,

    #[error("calibration targets are infeasible for the respondent basis")]
    Infeasible,

    #[error("weight overflow: exp(b'lambda) exceeded {limit:e}")]
    WeightOverflow { limit: f64 },

    #[error("weighting and imputation forms disagree by {gap:e}")]
    DualFormMismatch { gap: f64 },

    #[error("gamma system did not converge within {iterations} outer iterations (max change {change:e})")]
    NonConvergence { iterations: usize, change: f64 },

    #[error("every cross-validation fit failed")]
    AllFoldsFailed,

    #[error("could not bracket the intercept for the requested response rate")]
    BracketFailure,

    #[error("missing column: {0}")]
    MissingColumn(String),
}
