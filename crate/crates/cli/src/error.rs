use std::fmt;
use std::process::ExitCode;

use minivla_core::eval::{EvalError, SimError};
use minivla_core::pipeline::{PipelineError, ScenarioError};

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Io = 1,
    Config = 2,
    Invariant = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Failure, source: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            source: source.into(),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(Failure::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn invariant(msg: impl fmt::Display) -> Self {
        Self::new(Failure::Invariant, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Self::new(Failure::Config, e),
            _ => Self::new(Failure::Invariant, e),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        Self::new(Failure::Io, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io { .. } | SimError::Json { .. } => Self::new(Failure::Io, e),
            SimError::InvalidWorld(_) => Self::new(Failure::Config, e),
            SimError::Policy { .. } | SimError::BadPlan { .. } => Self::new(Failure::Invariant, e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset { .. } | EvalError::Scenario(_) | EvalError::EmptyDataset { .. } => {
                Self::new(Failure::Io, e)
            }
            EvalError::Pipeline(p) => p.into(),
            _ => Self::new(Failure::Invariant, e),
        }
    }
}

pub trait ResultExt<T> {
    fn or_fail(self, kind: Failure) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn or_fail(self, kind: Failure) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(kind, e))
    }
}
