use cbrelab_core::Error;
use thiserror::Error;

/// Exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Pass = 0,
    /// I/O or numerical failure outside the scheme below.
    Fault = 1,
    StatisticalFail = 2,
    Precondition = 3,
    ConfigError = 4,
}

impl Outcome {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(Error),
    #[error("{0}")]
    Engine(Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotErgodic(_) | Error::ExtinctionDegenerate | Error::NotApplicable(_) => CliError::Precondition(e),
            Error::InvalidArgument(_)
            | Error::InvalidMeasure(_)
            | Error::GridMismatch(_)
            | Error::TailNotNegligible { .. } => CliError::Config(e.to_string()),
            e => CliError::Engine(e),
        }
    }
}

impl CliError {
    pub fn outcome(&self) -> Outcome {
        match self {
            CliError::Config(_) => Outcome::ConfigError,
            CliError::Precondition(_) => Outcome::Precondition,
            CliError::Engine(Error::ErgodicityRefuted(_)) => Outcome::StatisticalFail,
            CliError::Engine(_) | CliError::Io(_) => Outcome::Fault,
        }
    }
}
