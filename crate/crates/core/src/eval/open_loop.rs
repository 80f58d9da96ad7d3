//! Open-loop minADE over a set of scenarios with ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{diversity, min_ade};
use super::EvalError;
use crate::pipeline::{Engine, InferenceRequest, Scenario, Trajectory};

pub const DEFAULT_K: usize = 6;

/// A scenario whose ground-truth future is known.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopCase {
    pub id: String,
    pub scenario: Scenario,
    pub gt_future: Trajectory,
}

impl OpenLoopCase {
    pub fn new(id: impl Into<String>, scenario: Scenario) -> Result<Self, EvalError> {
        let id = id.into();
        let gt_future = scenario
            .gt_future
            .clone()
            .ok_or_else(|| EvalError::MissingGroundTruth(id.clone()))?;
        Ok(Self {
            id,
            scenario,
            gt_future,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    cases: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    path: PathBuf,
}

/// Cases that could not be loaded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCase {
    pub id: String,
    pub reason: String,
}

/// Loads `{"cases": [{"id", "path"}]}`; paths are relative to the manifest.
/// Unreadable cases are skipped with a warning.
pub fn load_dataset(manifest: &Path) -> Result<(Vec<OpenLoopCase>, Vec<SkippedCase>), EvalError> {
    let text = fs::read_to_string(manifest).map_err(|e| EvalError::Dataset {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let parsed: Manifest = serde_json::from_str(&text).map_err(|e| EvalError::Dataset {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for entry in parsed.cases {
        let loaded = Scenario::load(&base.join(&entry.path))
            .map_err(EvalError::from)
            .and_then(|s| OpenLoopCase::new(entry.id.clone(), s));
        match loaded {
            Ok(case) => cases.push(case),
            Err(e) => {
                log::warn!("skipping case {}: {e}", entry.id);
                skipped.push(SkippedCase {
                    id: entry.id,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((cases, skipped))
}

/// Produces `k` trajectory samples for a case.
pub trait TrajectorySampler {
    fn sample(&mut self, case: &OpenLoopCase, k: usize) -> Result<Vec<Trajectory>, EvalError>;
}

/// Runs the pipeline with `k` trajectories per case.
pub struct EngineSampler {
    pub engine: Engine,
    /// Supplies topology, KV strategy, executor and seeds; the scenario
    /// fields and sample count are replaced per case.
    pub template: InferenceRequest,
}

impl TrajectorySampler for EngineSampler {
    fn sample(&mut self, case: &OpenLoopCase, k: usize) -> Result<Vec<Trajectory>, EvalError> {
        let mut req = InferenceRequest::from_scenario(&case.scenario);
        let t = &self.template;
        req.num_trajectories = k;
        req.topology = t.topology;
        req.kv_strategy = t.kv_strategy;
        req.executor = t.executor;
        req.sample_mode = t.sample_mode;
        req.sampler_seed = t.sampler_seed;
        req.action_seed = t.action_seed;
        req.max_new_tokens = t.max_new_tokens;
        req.stop_on_termination = t.stop_on_termination;
        Ok(self.engine.infer(&req)?.trajectories)
    }
}

/// Returns the ground truth `k` times.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthSampler;

impl TrajectorySampler for GroundTruthSampler {
    fn sample(&mut self, case: &OpenLoopCase, k: usize) -> Result<Vec<Trajectory>, EvalError> {
        Ok(vec![case.gt_future.clone(); k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub case_id: String,
    pub min_ade_m: f64,
    /// Present when `k >= 2`.
    pub diversity_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenLoopReport {
    pub k: usize,
    pub cases: Vec<CaseResult>,
    pub mean_min_ade_m: f64,
    pub skipped: usize,
}

impl OpenLoopReport {
    pub fn from_cases(k: usize, cases: Vec<CaseResult>, skipped: usize) -> Result<Self, EvalError> {
        if cases.is_empty() {
            return Err(EvalError::EmptyDataset { skipped });
        }
        let mean = cases.iter().map(|c| c.min_ade_m).sum::<f64>() / cases.len() as f64;
        Ok(Self {
            k,
            cases,
            mean_min_ade_m: mean,
            skipped,
        })
    }
}

pub fn evaluate_case(
    case: &OpenLoopCase,
    sampler: &mut dyn TrajectorySampler,
    k: usize,
) -> Result<CaseResult, EvalError> {
    if k == 0 {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    let samples = sampler.sample(case, k)?;
    if samples.len() != k {
        return Err(EvalError::TooFewSamples {
            need: k,
            got: samples.len(),
        });
    }
    Ok(CaseResult {
        case_id: case.id.clone(),
        min_ade_m: min_ade(&samples, &case.gt_future)?,
        diversity_m: if k >= 2 { Some(diversity(&samples)?) } else { None },
    })
}

/// Evaluates every case in order with one sampler.
pub fn eval_open_loop(
    cases: &[OpenLoopCase],
    sampler: &mut dyn TrajectorySampler,
    k: usize,
    skipped: usize,
) -> Result<OpenLoopReport, EvalError> {
    let results = cases
        .iter()
        .map(|c| evaluate_case(c, sampler, k))
        .collect::<Result<Vec<_>, _>>()?;
    OpenLoopReport::from_cases(k, results, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActionSequence;
    use crate::pipeline::{actions_to_trajectory, Procedural};

    fn case(id: &str) -> OpenLoopCase {
        let mut s = Scenario::synthetic(14, 14, 1, 4.0);
        s.gt_future = Some(actions_to_trajectory(&ActionSequence::constant(0.2, 0.01), 4.0).unwrap());
        OpenLoopCase::new(id, s).unwrap()
    }

    #[test]
    fn ground_truth_sampler_scores_zero() {
        let cases = [case("a"), case("b")];
        let r = eval_open_loop(&cases, &mut GroundTruthSampler, 6, 0).unwrap();
        assert_eq!(r.mean_min_ade_m, 0.0);
        assert_eq!(r.cases[0].diversity_m, Some(0.0));
        assert!(eval_open_loop(&[], &mut GroundTruthSampler, 6, 2).is_err());
        assert!(eval_open_loop(&cases, &mut GroundTruthSampler, 0, 0).is_err());
    }

    #[test]
    fn missing_ground_truth_is_rejected() {
        assert!(matches!(
            OpenLoopCase::new("x", Scenario::synthetic(14, 14, 1, 1.0)),
            Err(EvalError::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn manifest_skips_bad_cases() {
        let dir = tempfile::tempdir().unwrap();
        let c = case("good");
        let body = serde_json::json!({
            "frames": {"procedural": Procedural { height: 14, width: 14, seed: 1 }},
            "past_poses": c.scenario.past_poses,
            "gt_future": c.gt_future,
        });
        fs::write(dir.path().join("good.json"), body.to_string()).unwrap();
        let no_gt = serde_json::json!({
            "frames": {"procedural": Procedural { height: 14, width: 14, seed: 1 }},
            "past_poses": c.scenario.past_poses,
        });
        fs::write(dir.path().join("no_gt.json"), no_gt.to_string()).unwrap();
        let manifest = dir.path().join("cases.json");
        fs::write(
            &manifest,
            r#"{"cases": [{"id": "good", "path": "good.json"}, {"id": "gone", "path": "gone.json"}, {"id": "nogt", "path": "no_gt.json"}]}"#,
        )
        .unwrap();
        let (cases, skipped) = load_dataset(&manifest).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].gt_future, c.gt_future);
        assert_eq!(
            skipped.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            ["gone", "nogt"]
        );
        assert!(load_dataset(&dir.path().join("none.json")).is_err());
    }
}
