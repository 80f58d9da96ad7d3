//! Preprocessing, reasoning, action generation and postprocessing for one
//! request, under either reasoning topology.

pub mod scenario;
pub mod tokenizer;
pub mod trajectory;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kv::{KvCache, KvError, KvStrategy};
use crate::model::{
    initial_actions, patchify, ActionSequence, DecodeOptions, Executor, FrameSet, IterationTrace, ModelError,
    ModelRuntime, ModelWeights, Patches, SampleMode, TokenSampler, ACTION_STEPS,
};
use crate::profiler::{LatencyComponent, LatencyReport, ProfilerError, Recorder};
use crate::substrate::Substrate;

pub use scenario::{Procedural, Prompts, Scenario, ScenarioError, DEFAULT_SYSTEM_PROMPT, DEFAULT_USER_PROMPT};
pub use tokenizer::{TextTokenizer, TokenKind, TokenSequence, TrajectoryTokenizer};
pub use trajectory::{actions_to_trajectory, Pose, PoseHistory, Trajectory, TrajectoryError, UnicycleState, DT};

/// Where the N samples diverge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// N reasoning passes over batch-replicated inputs, one KV cache per lane.
    Multi,
    /// One reasoning pass whose KV cache is replicated for N action samples.
    #[default]
    Single,
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi" => Ok(Self::Multi),
            "single" => Ok(Self::Single),
            other => Err(format!("unknown topology '{other}' (expected multi or single)")),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Multi => "multi",
            Self::Single => "single",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocessing,
    Vision,
    Prefill,
    Decode,
    ActionGen,
    Postprocessing,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Preprocessing => "preprocessing",
            Self::Vision => "reasoning-vision",
            Self::Prefill => "reasoning-prefill",
            Self::Decode => "reasoning-decode",
            Self::ActionGen => "action-generation",
            Self::Postprocessing => "postprocessing",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid request: {0}")]
    Config(String),
    #[error("{stage} failed: {source}")]
    Model {
        stage: Stage,
        #[source]
        source: ModelError,
    },
    #[error("{stage} failed: {source}")]
    Trajectory {
        stage: Stage,
        #[source]
        source: TrajectoryError,
    },
    #[error(transparent)]
    Profiler(#[from] ProfilerError),
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<ModelError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Model {
            stage,
            source: e.into(),
        })
    }
}

/// One inference request.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub frames: FrameSet,
    pub system_prompt: String,
    pub user_prompt: String,
    pub pose_history: PoseHistory,
    pub num_trajectories: usize,
    pub topology: Topology,
    pub kv_strategy: KvStrategy,
    pub executor: Executor,
    pub sample_mode: SampleMode,
    /// Lane `i` samples with `sampler_seed + i`.
    pub sampler_seed: u64,
    /// Lane `i` starts from noise seeded with `action_seed + i` unless
    /// `lane_action_seeds` gives explicit seeds.
    pub action_seed: u64,
    pub lane_action_seeds: Option<Vec<u64>>,
    /// Overrides the model's `max_new_tokens` when set.
    pub max_new_tokens: Option<usize>,
    /// When false, exactly `max_new_tokens` CoT tokens are generated.
    pub stop_on_termination: bool,
    /// Record per-lane reasoning KV digests in the diagnostics.
    pub collect_fingerprints: bool,
}

impl InferenceRequest {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            frames: scenario.frames.clone(),
            system_prompt: scenario.prompts.system.clone(),
            user_prompt: scenario.prompts.user.clone(),
            pose_history: scenario.past_poses.clone(),
            num_trajectories: 1,
            topology: Topology::default(),
            kv_strategy: KvStrategy::Static,
            executor: Executor::Eager,
            sample_mode: SampleMode::default(),
            sampler_seed: 0,
            action_seed: 0,
            lane_action_seeds: None,
            max_new_tokens: None,
            stop_on_termination: true,
            collect_fingerprints: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.num_trajectories == 0 {
            return Err(PipelineError::Config("num_trajectories must be at least 1".into()));
        }
        if self.executor == Executor::Graph && self.kv_strategy != KvStrategy::Static {
            return Err(PipelineError::Config(
                "graph executor requires the static KV strategy (--kv static)".into(),
            ));
        }
        if let Some(seeds) = &self.lane_action_seeds {
            if seeds.len() != self.num_trajectories {
                return Err(PipelineError::Config(format!(
                    "{} lane action seeds for {} trajectories",
                    seeds.len(),
                    self.num_trajectories
                )));
            }
        }
        Ok(())
    }

    pub fn action_seeds(&self) -> Vec<u64> {
        match &self.lane_action_seeds {
            Some(seeds) => seeds.clone(),
            None => (0..self.num_trajectories as u64)
                .map(|lane| self.action_seed.wrapping_add(lane))
                .collect(),
        }
    }

    fn reasoning_lanes(&self) -> usize {
        match self.topology {
            Topology::Multi => self.num_trajectories,
            Topology::Single => 1,
        }
    }
}

/// Output of preprocessing: patches and the full prompt token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub patches: Patches,
    pub tokens: TokenSequence,
}

/// Output of the reasoning stage.
#[derive(Debug)]
pub struct ReasoningOutput {
    /// One CoT per reasoning lane.
    pub cot_tokens: Vec<Vec<u32>>,
    /// Sealed cache, one lane per reasoning pass.
    pub kv: KvCache,
    pub prompt_len: usize,
    /// Decode steps run (`m`), so `kv.reasoning_len() == prompt_len + m`.
    pub token_count: usize,
    /// Final-norm hidden state of the last prompt position, per lane.
    pub prefill_hidden: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub prompt_len: usize,
    pub reasoning_len: usize,
    /// Reasoning KV digest per action lane, when requested.
    pub lane_fingerprints: Vec<String>,
    pub iterations: Vec<IterationTrace>,
    pub graph_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub reasonings: Vec<String>,
    pub cot_tokens: Vec<Vec<u32>>,
    pub trajectories: Vec<Trajectory>,
    pub actions: Vec<ActionSequence>,
    pub latency: LatencyReport,
    pub diagnostics: Diagnostics,
}

impl InferenceResult {
    /// SHA-256 over the bit patterns of every trajectory pose, in lane order.
    pub fn trajectory_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.trajectories {
            for p in t.poses() {
                for v in [p.x, p.y, p.yaw] {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A model bound into its own substrate, plus the tokenizers.
#[derive(Debug)]
pub struct Engine {
    rt: ModelRuntime,
    text: TextTokenizer,
    trajectory: TrajectoryTokenizer,
}

impl Engine {
    pub fn new(weights: Arc<ModelWeights>) -> Result<Self, PipelineError> {
        Self::with_substrate(weights, Substrate::new())
    }

    pub fn with_substrate(weights: Arc<ModelWeights>, sub: Substrate) -> Result<Self, PipelineError> {
        let vocab = weights.config.vocab();
        let text = TextTokenizer::new(vocab).map_err(PipelineError::Config)?;
        let rt = ModelRuntime::with_substrate(weights, sub).map_err(|e| match e {
            ModelError::Config(msg) => PipelineError::Config(msg),
            other => PipelineError::Model {
                stage: Stage::Preprocessing,
                source: other,
            },
        })?;
        Ok(Self {
            rt,
            text,
            trajectory: TrajectoryTokenizer::new(vocab),
        })
    }

    pub fn runtime(&self) -> &ModelRuntime {
        &self.rt
    }

    pub fn runtime_mut(&mut self) -> &mut ModelRuntime {
        &mut self.rt
    }

    pub fn text_tokenizer(&self) -> &TextTokenizer {
        &self.text
    }

    /// Patches the frames and builds the prompt: images, system prompt,
    /// past trajectory, user prompt.
    pub fn preprocess(&self, req: &InferenceRequest) -> Result<Prepared, PipelineError> {
        let patches = patchify(&req.frames, self.rt.config().patch_size).at(Stage::Preprocessing)?;
        let mut tokens = TokenSequence::image_placeholders(patches.frames * patches.per_frame);
        tokens.extend(&self.text.tokenize(&req.system_prompt));
        tokens.extend(&self.trajectory.tokenize(&req.pose_history));
        tokens.extend(&self.text.tokenize(&req.user_prompt));
        Ok(Prepared { patches, tokens })
    }

    fn max_new_tokens(&self, req: &InferenceRequest) -> usize {
        req.max_new_tokens.unwrap_or(self.rt.config().max_new_tokens)
    }

    /// Vision, prefill and decode. Multi topology runs every stage on N
    /// replicated lanes; single runs one lane.
    pub fn run_reasoning(
        &mut self,
        req: &InferenceRequest,
        prepared: &Prepared,
        rec: &mut Recorder,
    ) -> Result<ReasoningOutput, PipelineError> {
        let lanes = req.reasoning_lanes();
        let max_new = self.max_new_tokens(req);
        let cfg = self.rt.config().clone();
        let rt = &mut self.rt;

        let visual = rec
            .time(LatencyComponent::ReasoningVision, || {
                rt.vision_encode(&prepared.patches, lanes)
            })?
            .at(Stage::Vision)?;

        let prompt_len = prepared.tokens.len();
        let (mut kv, prefill) = rec
            .time(LatencyComponent::ReasoningPrefill, || -> Result<_, ModelError> {
                let mut kv = KvCache::new(
                    &mut rt.sub,
                    req.kv_strategy,
                    cfg.decoder_blocks,
                    lanes,
                    cfg.kv_dim,
                    prompt_len + max_new,
                    ACTION_STEPS,
                )?;
                let out = rt.prefill(&prepared.tokens.ids, Some(&visual), &mut kv)?;
                rt.sub.free(visual.buffer)?;
                Ok((kv, out))
            })?
            .at(Stage::Prefill)?;

        let generation = rec
            .time(LatencyComponent::ReasoningDecode, || -> Result<_, ModelError> {
                let mut sampler = TokenSampler::new(req.sample_mode, req.sampler_seed, lanes);
                let opts = DecodeOptions {
                    max_new_tokens: max_new,
                    stop_on_termination: req.stop_on_termination,
                };
                let g = rt.generate(&prefill, &mut kv, &mut sampler, opts)?;
                kv.seal()?;
                Ok(g)
            })?
            .at(Stage::Decode)?;

        Ok(ReasoningOutput {
            cot_tokens: generation.cot,
            kv,
            prompt_len,
            token_count: generation.steps,
            prefill_hidden: prefill.hidden,
        })
    }

    /// Diffusion over the reasoning KV: single topology first replicates the
    /// one cache to N lanes; multi uses each lane's own cache.
    pub fn run_action_generation(
        &mut self,
        req: &InferenceRequest,
        reasoning: ReasoningOutput,
        rec: &mut Recorder,
    ) -> Result<ActionStage, PipelineError> {
        let n = req.num_trajectories;
        let init = initial_actions(&req.action_seeds());
        let rt = &mut self.rt;
        let section = rec.begin(LatencyComponent::ActionGen)?;
        let run = (|| -> Result<_, ModelError> {
            let mut kv = match req.topology {
                Topology::Single => {
                    let replicated = reasoning.kv.replicate_for_batch(&mut rt.sub, n)?;
                    reasoning.kv.release(&mut rt.sub)?;
                    replicated
                }
                Topology::Multi => reasoning.kv,
            };
            let out = rt.diffusion_refine(&init, &mut kv, req.executor)?;
            Ok((kv, out))
        })();
        rec.end(section)?;
        let (kv, out) = run.at(Stage::ActionGen)?;
        Ok(ActionStage {
            kv,
            actions: out.actions,
            iterations: out.iterations,
            graph_len: out.graph_len,
        })
    }

    /// Runs all four stages.
    pub fn infer(&mut self, req: &InferenceRequest) -> Result<InferenceResult, PipelineError> {
        req.validate()?;
        let mut rec = Recorder::new();
        let started = Instant::now();
        let stats_before = self.rt.sub.stats();

        let prepared = rec.time(LatencyComponent::Preprocessing, || self.preprocess(req))??;
        let reasoning = self.run_reasoning(req, &prepared, &mut rec)?;
        let cot_tokens = reasoning.cot_tokens.clone();
        let token_count = reasoning.token_count;
        let prompt_len = reasoning.prompt_len;
        let stage = self.run_action_generation(req, reasoning, &mut rec)?;

        let post = Instant::now();
        let speed = req.pose_history.current_speed();
        let trajectories = stage
            .actions
            .iter()
            .map(|a| actions_to_trajectory(a, speed))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| PipelineError::Trajectory {
                stage: Stage::Postprocessing,
                source,
            })?;
        let reasonings = cot_tokens.iter().map(|ids| self.text.detokenize(ids)).collect();
        rec.add_postprocessing(post.elapsed());
        let total = started.elapsed();

        let kv_bytes = stage.kv.footprint_bytes();
        let reasoning_len = stage.kv.reasoning_len();
        let lane_fingerprints = if req.collect_fingerprints {
            (0..req.num_trajectories)
                .map(|lane| stage.kv.lane_reasoning_fingerprint(&self.rt.sub, lane))
                .collect::<Result<Vec<_>, KvError>>()
                .at(Stage::Postprocessing)?
        } else {
            Vec::new()
        };
        stage.kv.release(&mut self.rt.sub).at(Stage::Postprocessing)?;
        let stats = self.rt.sub.stats().since(&stats_before);
        let iter_times: Vec<Duration> = stage.iterations.iter().map(|t| t.elapsed).collect();
        let latency = LatencyReport::from_recorder(&rec, total, &iter_times, &stats, kv_bytes, token_count);

        Ok(InferenceResult {
            reasonings,
            cot_tokens,
            trajectories,
            actions: stage.actions,
            latency,
            diagnostics: Diagnostics {
                prompt_len,
                reasoning_len,
                lane_fingerprints,
                iterations: stage.iterations,
                graph_len: stage.graph_len,
            },
        })
    }
}

impl Engine {
    /// One unmeasured warm-up run, then `repeats` timed runs. Returns the last
    /// result with its latency replaced by the median over the timed runs.
    pub fn profile(&mut self, req: &InferenceRequest, repeats: usize) -> Result<InferenceResult, PipelineError> {
        if repeats == 0 {
            return Err(PipelineError::Config("repeats must be at least 1".into()));
        }
        self.infer(req)?;
        let mut reports = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let r = self.infer(req)?;
            reports.push(r.latency.clone());
            last = Some(r);
        }
        let mut result = last.expect("repeats >= 1");
        result.latency = LatencyReport::median(&reports)?;
        Ok(result)
    }

    /// Profiles several requests with their timed runs interleaved round-robin,
    /// so drift in machine speed lands on every request alike. Each request gets
    /// one warm-up run first.
    pub fn profile_sweep(
        &mut self,
        reqs: &[InferenceRequest],
        repeats: usize,
    ) -> Result<Vec<InferenceResult>, PipelineError> {
        if repeats == 0 {
            return Err(PipelineError::Config("repeats must be at least 1".into()));
        }
        for req in reqs {
            self.infer(req)?;
        }
        let mut reports = vec![Vec::with_capacity(repeats); reqs.len()];
        let mut last = vec![None; reqs.len()];
        for _ in 0..repeats {
            for (i, req) in reqs.iter().enumerate() {
                let r = self.infer(req)?;
                reports[i].push(r.latency.clone());
                last[i] = Some(r);
            }
        }
        last.into_iter()
            .zip(&reports)
            .map(|(r, reps)| {
                let mut r: InferenceResult = r.expect("repeats >= 1");
                r.latency = LatencyReport::median(reps)?;
                Ok(r)
            })
            .collect()
    }
}

/// Output of the action stage; `kv` is the cache the actions attended to.
#[derive(Debug)]
pub struct ActionStage {
    pub kv: KvCache,
    pub actions: Vec<ActionSequence>,
    pub iterations: Vec<IterationTrace>,
    pub graph_len: Option<usize>,
}
