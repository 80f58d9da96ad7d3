use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ACTION_STEPS;
use super::layers::{self, AttendSource, BlockDims, BlockScratch};
use super::{ModelError, ModelRuntime};
use crate::kv::{KvCache, KvStrategy};
use crate::substrate::{BufferId, DispatchStats, Op, OpCommand, Substrate, SubstrateError};

/// Control input for one 0.1 s step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionStep {
    /// m/s²
    pub accel: f32,
    /// 1/m
    pub curvature: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub steps: Vec<ActionStep>,
}

impl ActionSequence {
    pub fn new(steps: Vec<ActionStep>) -> Result<Self, ModelError> {
        if steps.len() != ACTION_STEPS {
            return Err(ModelError::Shape(format!(
                "action sequence has {} steps, expected {ACTION_STEPS}",
                steps.len()
            )));
        }
        Ok(Self { steps })
    }

    pub fn constant(accel: f32, curvature: f32) -> Self {
        Self {
            steps: vec![ActionStep { accel, curvature }; ACTION_STEPS],
        }
    }

    /// From interleaved `(accel, curvature)` pairs.
    pub fn from_flat(values: &[f32]) -> Result<Self, ModelError> {
        Self::new(
            values
                .chunks_exact(2)
                .map(|p| ActionStep {
                    accel: p[0],
                    curvature: p[1],
                })
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.steps.iter().flat_map(|s| [s.accel, s.curvature]).collect()
    }
}

/// Standard-normal starting sequences, one per seed.
pub fn initial_actions(seeds: &[u64]) -> Vec<ActionSequence> {
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..2 * ACTION_STEPS).map(|_| rng.sample(StandardNormal)).collect();
            ActionSequence::from_flat(&values).expect("generated exactly ACTION_STEPS pairs")
        })
        .collect()
}

/// How diffusion iterations reach the substrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Executor {
    /// Every command dispatched every iteration.
    #[default]
    Eager,
    /// Iteration 1 eager, iteration 2 captured, later iterations replayed.
    Graph,
}

impl FromStr for Executor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eager" => Ok(Self::Eager),
            "graph" => Ok(Self::Graph),
            other => Err(format!("unknown executor '{other}' (expected eager or graph)")),
        }
    }
}

impl fmt::Display for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eager => "eager",
            Self::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationMode {
    Eager,
    Capture,
    Replay,
}

/// Cost of one diffusion iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    /// 1-based.
    pub iteration: usize,
    pub mode: IterationMode,
    pub elapsed: Duration,
    pub stats: DispatchStats,
    pub kv_allocs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOutput {
    pub actions: Vec<ActionSequence>,
    pub iterations: Vec<IterationTrace>,
    /// Commands in the captured graph, when one was captured.
    pub graph_len: Option<usize>,
    /// Substrate activity while the workspace was set up, before iteration 1.
    pub setup: DispatchStats,
}

/// Buffers the action stage reuses across iterations, allocated up front so
/// that iterations themselves never allocate outside the KV cache.
#[derive(Debug)]
struct ActionWorkspace {
    lanes: usize,
    actions: BufferId,
    encoded: BufferId,
    x: BufferId,
    delta: BufferId,
    scratch: BlockScratch,
}

impl ActionWorkspace {
    fn alloc(sub: &mut Substrate, lanes: usize, dims: BlockDims) -> Result<Self, SubstrateError> {
        let rows = lanes * ACTION_STEPS;
        Ok(Self {
            lanes,
            actions: sub.alloc(&[rows, 2])?,
            encoded: sub.alloc(&[rows, dims.hidden])?,
            x: sub.alloc(&[rows, dims.hidden])?,
            delta: sub.alloc(&[rows, 2])?,
            scratch: BlockScratch::alloc(sub, dims)?,
        })
    }

    fn free(self, sub: &mut Substrate) -> Result<(), SubstrateError> {
        for id in [self.actions, self.encoded, self.x, self.delta] {
            sub.free(id)?;
        }
        self.scratch.free(sub)
    }
}

fn flatten(actions: &[ActionSequence]) -> Vec<f32> {
    actions.iter().flat_map(|a| a.to_flat()).collect()
}

fn unflatten(values: &[f32]) -> Result<Vec<ActionSequence>, ModelError> {
    values
        .chunks_exact(2 * ACTION_STEPS)
        .map(ActionSequence::from_flat)
        .collect()
}

impl ModelRuntime {
    fn action_workspace(&mut self, lanes: usize, attend_tokens: usize) -> Result<ActionWorkspace, ModelError> {
        let cfg = self.config();
        let dims = BlockDims {
            groups: lanes,
            rows: ACTION_STEPS,
            hidden: cfg.action_hidden_dim,
            kv_dim: cfg.kv_dim,
            heads: cfg.heads,
            tokens: attend_tokens,
        };
        Ok(ActionWorkspace::alloc(&mut self.sub, lanes, dims)?)
    }

    /// Position encodings plus a two-layer GELU MLP over (accel, curvature).
    fn encode_into(&mut self, ws: &ActionWorkspace) -> Result<(), ModelError> {
        let rows = ws.lanes * ACTION_STEPS;
        let b = &self.bound;
        layers::linear(
            &mut self.sub,
            ws.actions,
            rows,
            &b.action_in_w,
            Some(&b.action_in_b),
            ws.encoded,
        )?;
        layers::add_in_place(&mut self.sub, ws.encoded, b.action_pos.id)?;
        self.sub
            .dispatch(OpCommand::new(Op::Gelu, vec![ws.encoded], ws.encoded))?;
        layers::linear(
            &mut self.sub,
            ws.encoded,
            rows,
            &b.action_out_w,
            Some(&b.action_out_b),
            ws.x,
        )?;
        Ok(())
    }

    /// One parallel pass of the action decoder over the embeddings in
    /// `ws.x`, leaving the per-step update in `ws.delta`.
    fn decoder_pass_into(&mut self, ws: &ActionWorkspace, kv: &mut KvCache) -> Result<(), ModelError> {
        let s = &ws.scratch;
        for (b, blk) in self.bound.action_blocks.iter().enumerate() {
            layers::project_qkv(&mut self.sub, blk, ws.x, s)?;
            kv.write_action_kv(&mut self.sub, b, s.k, s.v)?;
            let view = kv.attend_view(b)?;
            let src = AttendSource {
                keys: (view.buffer, view.keys),
                values: (view.buffer, view.values),
            };
            layers::attend_and_mlp(&mut self.sub, blk, ws.x, s, src, None)?;
        }
        let bw = &self.bound;
        layers::layer_norm(&mut self.sub, ws.x, &bw.action_ln_gamma, &bw.action_ln_beta, s.normed)?;
        layers::linear(
            &mut self.sub,
            s.normed,
            ws.lanes * ACTION_STEPS,
            &bw.action_head_w,
            Some(&bw.action_head_b),
            ws.delta,
        )?;
        Ok(())
    }

    /// `a += update_scale * Δ(a)`, entirely on the substrate.
    fn refine_step(&mut self, ws: &ActionWorkspace, kv: &mut KvCache) -> Result<(), ModelError> {
        self.encode_into(ws)?;
        self.decoder_pass_into(ws, kv)?;
        let factor = self.config().update_scale;
        self.sub
            .dispatch(OpCommand::new(Op::Scale { factor }, vec![ws.delta], ws.delta))?;
        layers::add_in_place(&mut self.sub, ws.actions, ws.delta)?;
        Ok(())
    }

    fn check_lanes(&self, actions: &[ActionSequence], kv: &KvCache) -> Result<(), ModelError> {
        if actions.len() != kv.batch() {
            return Err(ModelError::LaneMismatch {
                expected: kv.batch(),
                got: actions.len(),
            });
        }
        if let Some(bad) = actions.iter().find(|a| a.steps.len() != ACTION_STEPS) {
            return Err(ModelError::Shape(format!(
                "action sequence of {} steps",
                bad.steps.len()
            )));
        }
        Ok(())
    }

    /// Action embeddings, `[lanes * ACTION_STEPS, action_hidden]`.
    pub fn action_encode(&mut self, actions: &[ActionSequence]) -> Result<Vec<f32>, ModelError> {
        if let Some(bad) = actions.iter().find(|a| a.steps.len() != ACTION_STEPS) {
            return Err(ModelError::Shape(format!(
                "action sequence of {} steps",
                bad.steps.len()
            )));
        }
        let ws = self.action_workspace(actions.len(), 1)?;
        self.sub.write(ws.actions, &flatten(actions))?;
        self.encode_into(&ws)?;
        let out = self.read_rows(ws.x, actions.len() * ACTION_STEPS, self.config().action_hidden_dim)?;
        ws.free(&mut self.sub)?;
        Ok(out)
    }

    /// The update Δ for one iteration, as an action sequence per lane. Starts
    /// a fresh iteration on `kv`, whose reasoning region must be sealed.
    pub fn action_decoder_pass(
        &mut self,
        actions: &[ActionSequence],
        kv: &mut KvCache,
    ) -> Result<Vec<ActionSequence>, ModelError> {
        self.check_lanes(actions, kv)?;
        kv.begin_iteration()?;
        let ws = self.action_workspace(actions.len(), kv.reasoning_len() + ACTION_STEPS)?;
        self.sub.write(ws.actions, &flatten(actions))?;
        self.encode_into(&ws)?;
        self.decoder_pass_into(&ws, kv)?;
        let delta = self.read_rows(ws.delta, actions.len() * ACTION_STEPS, 2)?;
        ws.free(&mut self.sub)?;
        unflatten(&delta)
    }

    /// Refines `init` for `diffusion_iters` iterations against the sealed
    /// reasoning KV in `kv`.
    pub fn diffusion_refine(
        &mut self,
        init: &[ActionSequence],
        kv: &mut KvCache,
        executor: Executor,
    ) -> Result<DiffusionOutput, ModelError> {
        self.check_lanes(init, kv)?;
        if executor == Executor::Graph && kv.strategy() != KvStrategy::Static {
            return Err(ModelError::Config(
                "graph executor requires the static KV strategy".into(),
            ));
        }
        if !kv.is_sealed() {
            return Err(crate::kv::KvError::NotSealed.into());
        }
        let setup_start = self.sub.stats();
        let ws = self.action_workspace(init.len(), kv.reasoning_len() + ACTION_STEPS)?;
        self.sub.write(ws.actions, &flatten(init))?;
        let setup = self.sub.stats().since(&setup_start);

        let mut graph = None;
        let mut iterations = Vec::with_capacity(self.config().diffusion_iters);
        for iteration in 1..=self.config().diffusion_iters {
            let before = self.sub.stats();
            let kv_before = kv.kv_allocations();
            let start = Instant::now();
            kv.begin_iteration()?;
            let mode = match (executor, iteration, &graph) {
                (Executor::Graph, 2, _) => {
                    let token = self.sub.begin_capture()?;
                    if let Err(e) = self.refine_step(&ws, kv) {
                        self.sub.abort_capture();
                        return Err(e);
                    }
                    graph = Some(self.sub.end_capture(token)?.tagged(2));
                    IterationMode::Capture
                }
                (Executor::Graph, _, Some(g)) => {
                    self.sub.replay(g)?;
                    kv.mark_replayed_iteration()?;
                    IterationMode::Replay
                }
                _ => {
                    self.refine_step(&ws, kv)?;
                    IterationMode::Eager
                }
            };
            iterations.push(IterationTrace {
                iteration,
                mode,
                elapsed: start.elapsed(),
                stats: self.sub.stats().since(&before),
                kv_allocs: kv.kv_allocations() - kv_before,
            });
        }
        let values = self.read_rows(ws.actions, init.len() * ACTION_STEPS, 2)?;
        ws.free(&mut self.sub)?;
        Ok(DiffusionOutput {
            actions: unflatten(&values)?,
            iterations,
            graph_len: graph.map(|g| g.len()),
            setup,
        })
    }
}
