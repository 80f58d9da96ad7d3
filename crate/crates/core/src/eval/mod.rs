//! Trajectory metrics, open-loop evaluation and the closed-loop simulator.

pub mod metrics;
pub mod open_loop;
pub mod sim;

use std::path::PathBuf;

use thiserror::Error;

use crate::pipeline::{PipelineError, ScenarioError};

pub use metrics::{ade, diversity, min_ade};
pub use open_loop::{
    eval_open_loop, evaluate_case, load_dataset, CaseResult, EngineSampler, GroundTruthSampler, OpenLoopCase,
    OpenLoopReport, SkippedCase, TrajectorySampler, DEFAULT_K,
};
pub use sim::{
    classify, project, simulate_closed_loop, CenterlinePolicy, ClosedLoopWorld, ConstantPolicy, EnginePlanner,
    FailureEvent, FailureKind, Observation, Obstacle, Plan, PlanError, Planner, Selector, SimError, SimOutcome,
    TraceStep, EGO_RADIUS, LATERAL_DEVIATION_LIMIT,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("case {0} has no gt_future")]
    MissingGroundTruth(String),
    #[error("cannot load dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("no cases to evaluate ({skipped} skipped)")]
    EmptyDataset { skipped: usize },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
