//! Run configuration: a JSON file with full defaults, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use minivla_core::kv::KvStrategy;
use minivla_core::model::{Executor, ModelConfig, ModelWeights, SampleMode};
use minivla_core::pipeline::{Engine, InferenceRequest, Scenario, Topology};
use minivla_core::substrate::Substrate;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Failure, ResultExt};

/// Demo frames when no scenario file is given.
pub const DEMO_FRAME_SIZE: usize = 56;
pub const DEMO_SPEED: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub topology: Topology,
    pub kv_strategy: KvStrategy,
    pub executor: Executor,
    pub num_trajectories: usize,
    pub sample_mode: SampleMode,
    /// Reasoning sampler seed; lane `i` uses `seed + i`.
    pub seed: u64,
    /// Action-noise seed; defaults to `seed`.
    pub action_seed: Option<u64>,
    /// Overrides `model.max_new_tokens`.
    pub max_new_tokens: Option<usize>,
    pub stop_on_termination: bool,
    pub repeats: usize,
    pub sweep: Vec<usize>,
    /// Simulated cost of every substrate dispatch, in microseconds.
    pub dispatch_overhead_us: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            topology: Topology::Single,
            kv_strategy: KvStrategy::Static,
            executor: Executor::Eager,
            num_trajectories: 1,
            sample_mode: SampleMode::Stochastic,
            seed: 0,
            action_seed: None,
            max_new_tokens: None,
            stop_on_termination: true,
            repeats: 10,
            sweep: (1..=6).collect(),
            dispatch_overhead_us: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .or_fail(Failure::Io)?;
        serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .or_fail(Failure::Config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().or_fail(Failure::Config)?;
        if self.executor == Executor::Graph && self.kv_strategy != KvStrategy::Static {
            return Err(CliError::config(
                "graph executor requires the static KV strategy (--kv static)",
            ));
        }
        if self.num_trajectories == 0 {
            return Err(CliError::config("num_trajectories must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(CliError::config("repeats must be at least 1"));
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<(), CliError> {
        if self.sweep.is_empty() || !self.sweep.contains(&1) {
            return Err(CliError::config(format!(
                "sweep {:?} must be non-empty and contain 1",
                self.sweep
            )));
        }
        if self.sweep.contains(&0) {
            return Err(CliError::config("sweep values must be at least 1"));
        }
        Ok(())
    }

    pub fn engine(&self) -> Result<Engine, CliError> {
        let weights = ModelWeights::random(&self.model).or_fail(Failure::Config)?;
        let sub = Substrate::new().with_dispatch_overhead(Duration::from_micros(self.dispatch_overhead_us));
        Ok(Engine::with_substrate(Arc::new(weights), sub)?)
    }

    pub fn request(&self, scenario: &Scenario) -> InferenceRequest {
        InferenceRequest {
            num_trajectories: self.num_trajectories,
            topology: self.topology,
            kv_strategy: self.kv_strategy,
            executor: self.executor,
            sample_mode: self.sample_mode,
            sampler_seed: self.seed,
            action_seed: self.action_seed.unwrap_or(self.seed),
            max_new_tokens: self.max_new_tokens,
            stop_on_termination: self.stop_on_termination,
            ..InferenceRequest::from_scenario(scenario)
        }
    }
}

pub fn load_scenario(path: Option<&Path>) -> Result<Scenario, CliError> {
    match path {
        Some(p) => Ok(Scenario::load(p)?),
        None => Ok(Scenario::synthetic(DEMO_FRAME_SIZE, DEMO_FRAME_SIZE, 0, DEMO_SPEED)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let c = RunConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        assert_eq!(serde_json::from_str::<RunConfig>("{}").unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"topolgy": "multi"}"#).is_err());
    }

    #[test]
    fn contradictions_are_config_errors() {
        let c = RunConfig {
            executor: Executor::Graph,
            kv_strategy: KvStrategy::Dynamic,
            ..Default::default()
        };
        let e = c.validate().unwrap_err();
        assert_eq!(e.kind, Failure::Config);
        assert!(e.to_string().contains("static"));
        let s = RunConfig {
            sweep: vec![2, 3],
            ..Default::default()
        };
        assert!(s.validate_sweep().is_err());
    }
}
