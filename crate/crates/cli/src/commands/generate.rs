use minivla_core::kv::KvStrategy;
use minivla_core::model::{ActionSequence, Executor};
use minivla_core::pipeline::{InferenceResult, Topology, Trajectory};
use serde::Serialize;

use crate::args::RunArgs;
use crate::config::{load_scenario, RunConfig};
use crate::error::CliError;
use crate::output::{Kind, Output};

#[derive(Debug, Serialize)]
pub struct Counters {
    pub alloc_count: u64,
    pub dispatch_count: u64,
    pub replay_count: u64,
    pub kv_bytes: u64,
    pub cot_tokens: usize,
    pub prompt_len: usize,
    pub reasoning_len: usize,
    pub graph_len: Option<usize>,
}

impl Counters {
    pub fn of(r: &InferenceResult) -> Self {
        Self {
            alloc_count: r.latency.alloc_count,
            dispatch_count: r.latency.dispatch_count,
            replay_count: r.latency.replay_count,
            kv_bytes: r.latency.kv_bytes,
            cot_tokens: r.latency.cot_tokens,
            prompt_len: r.diagnostics.prompt_len,
            reasoning_len: r.diagnostics.reasoning_len,
            graph_len: r.diagnostics.graph_len,
        }
    }
}

#[derive(Debug, Serialize)]
struct GenerateData<'a> {
    topology: Topology,
    kv_strategy: KvStrategy,
    executor: Executor,
    num_trajectories: usize,
    seed: u64,
    action_seed: u64,
    reasonings: &'a [String],
    cot_tokens: &'a [Vec<u32>],
    trajectories: &'a [Trajectory],
    actions: &'a [ActionSequence],
    trajectory_digest: String,
    lane_reasoning_fingerprints: &'a [String],
    counters: Counters,
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let cfg: RunConfig = args.resolve()?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    let mut engine = cfg.engine()?;
    let mut req = cfg.request(&scenario);
    req.collect_fingerprints = true;
    let r = engine.infer(&req)?;

    let data = GenerateData {
        topology: req.topology,
        kv_strategy: req.kv_strategy,
        executor: req.executor,
        num_trajectories: req.num_trajectories,
        seed: req.sampler_seed,
        action_seed: req.action_seed,
        reasonings: &r.reasonings,
        cot_tokens: &r.cot_tokens,
        trajectories: &r.trajectories,
        actions: &r.actions,
        trajectory_digest: r.trajectory_digest(),
        lane_reasoning_fingerprints: &r.diagnostics.lane_fingerprints,
        counters: Counters::of(&r),
    };
    let mut out = Output::create(&cfg.out)?;
    out.json("result.json", Kind::Data, &data)?;
    out.json("latency.json", Kind::Timing, &r.latency)?;
    println!(
        "{} reasoning(s), {} trajectories, {} CoT tokens, total {:.2} ms",
        r.reasonings.len(),
        r.trajectories.len(),
        r.latency.cot_tokens,
        r.latency.total_ms
    );
    out.finish("generate")
}
