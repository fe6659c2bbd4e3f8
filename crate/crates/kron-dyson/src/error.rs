use std::fmt;

/// A single reason an ensemble was rejected, tagged with the offending field.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid symmetry class: {0}")]
    InvalidSymmetry(String),
    #[error("invalid ensemble: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("positivity lost: smallest eigenvalue of Im M is {0:e}")]
    PositivityLoss(f64),
    #[error("{what} is numerically singular (condition number {cond:e})")]
    Singular { what: &'static str, cond: f64 },
    #[error("two-point operator is near its pole (condition number {0:e}); use the pole decomposition")]
    NearPole(f64),
    #[error("smallest eigenvalue is not isolated (|mu1| = {0:e}, |mu2| = {1:e})")]
    DegenerateGap(f64, f64),
    #[error("quadrature inconsistency: {0}")]
    Quadrature(String),
    #[error("E0 = {e0} is outside the bulk (rho = {rho:e})")]
    NotInBulk { e0: f64, rho: f64 },
    #[error("density of states has mass {0}, expected 1")]
    MassDeviation(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 domain error, 2 input error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::InvalidSymmetry(_) | Error::NotInBulk { .. } => 1,
            Error::DimensionMismatch(_) | Error::InvalidParameter(_) | Error::Parse(_) | Error::Io(_) => 2,
            Error::NonConvergence { .. }
            | Error::PositivityLoss(_)
            | Error::Singular { .. }
            | Error::NearPole(_)
            | Error::DegenerateGap(..)
            | Error::Quadrature(_)
            | Error::MassDeviation(_) => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(format!("malformed JSON at line {} column {}: {e}", e.line(), e.column()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
