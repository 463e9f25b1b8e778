use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("quadrature did not converge: estimated error {estimate:e} after {intervals} subintervals")]
    IntegrationFailure { estimate: f64, intervals: usize },

    #[error("integrand returned a non-finite value at z = {0}")]
    NumericalDomainError(f64),

    #[error("measure has no mass beyond the requested threshold")]
    EmptyTail,

    #[error("test not applicable: {0}")]
    NotApplicable(String),

    #[error("first moment of large jumps is infinite")]
    MomentUndefined,

    #[error("cumulant exceeded the overflow guard at grid index {index}")]
    SolutionDiverged { index: usize },

    #[error("solver fault: {0}")]
    SolverFault(String),

    #[error("transform route gave {transform} but direct route gave {direct}")]
    ConsistencyFault { transform: f64, direct: f64 },

    #[error("Grey's condition fails; the extinction functional is infinite")]
    ExtinctionDegenerate,

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("truncated tail bound {bound:e} exceeds tolerance; extend the horizon")]
    TailNotNegligible { bound: f64 },

    #[error("not ergodic: {0}")]
    NotErgodic(String),

    #[error("state exceeded the overflow guard at step {step}")]
    PathExploded { step: usize },

    #[error("coupled paths crossed at step {step}")]
    CouplingFault { step: usize },

    #[error("ergodicity refuted: {0}")]
    ErgodicityRefuted(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}
