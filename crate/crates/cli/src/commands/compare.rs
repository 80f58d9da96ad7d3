use minivla_core::kv::KvStrategy;
use minivla_core::model::Executor;
use minivla_core::pipeline::InferenceResult;
use serde::Serialize;

use crate::args::RunArgs;
use crate::config::load_scenario;
use crate::error::CliError;
use crate::output::{num, Kind, Output};

pub const VARIANTS: [(&str, KvStrategy, Executor); 3] = [
    ("baseline", KvStrategy::Dynamic, Executor::Eager),
    ("static_kv", KvStrategy::Static, Executor::Eager),
    ("graph", KvStrategy::Static, Executor::Graph),
];

/// Counters summed over the diffusion iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoopCounters {
    pub alloc_count: u64,
    pub dispatch_count: u64,
    pub replay_count: u64,
    pub kv_allocs: u64,
    /// Dispatches issued in iterations 3 and later.
    pub replay_region_dispatch_count: u64,
}

impl LoopCounters {
    pub fn of(r: &InferenceResult) -> Self {
        let its = &r.diagnostics.iterations;
        Self {
            alloc_count: its.iter().map(|t| t.stats.alloc_count).sum(),
            dispatch_count: its.iter().map(|t| t.stats.dispatch_count).sum(),
            replay_count: its.iter().map(|t| t.stats.replay_count).sum(),
            kv_allocs: its.iter().map(|t| t.kv_allocs).sum(),
            replay_region_dispatch_count: its.iter().skip(2).map(|t| t.stats.dispatch_count).sum(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Reduction {
    n: usize,
    baseline_ms: f64,
    static_kv_ms: f64,
    graph_ms: f64,
    static_kv_reduction_pct: f64,
    graph_reduction_pct: f64,
}

#[derive(Debug, Serialize)]
struct Mismatch<'a> {
    n: usize,
    variants: Vec<(&'a str, String)>,
    first_difference: Option<(usize, usize)>,
}

fn first_difference(a: &InferenceResult, b: &InferenceResult) -> Option<(usize, usize)> {
    for (lane, (ta, tb)) in a.trajectories.iter().zip(&b.trajectories).enumerate() {
        for (step, (pa, pb)) in ta.poses().iter().zip(tb.poses()).enumerate() {
            if [pa.x, pa.y, pa.yaw].map(f64::to_bits) != [pb.x, pb.y, pb.yaw].map(f64::to_bits) {
                return Some((lane, step));
            }
        }
    }
    (a.trajectories.len() != b.trajectories.len()).then_some((a.trajectories.len().min(b.trajectories.len()), 0))
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.validate_sweep()?;
    let scenario = load_scenario(args.scenario.as_deref())?;
    let mut engine = cfg.engine()?;
    let mut out = Output::create(&cfg.out)?;

    let mut rows = Vec::new();
    let mut counter_rows = Vec::new();
    let mut reductions = Vec::new();
    for &n in &cfg.sweep {
        let mut results = Vec::new();
        for (name, kv, executor) in VARIANTS {
            let mut req = cfg.request(&scenario);
            req.num_trajectories = n;
            req.kv_strategy = kv;
            req.executor = executor;
            results.push((name, engine.profile(&req, cfg.repeats)?));
        }
        let base = &results[0].1;
        if results
            .iter()
            .any(|(_, r)| r.trajectory_digest() != base.trajectory_digest())
        {
            let diff = results.iter().skip(1).find_map(|(_, r)| first_difference(base, r));
            let report = Mismatch {
                n,
                variants: results.iter().map(|(v, r)| (*v, r.trajectory_digest())).collect(),
                first_difference: diff,
            };
            out.json("equivalence_failure.json", Kind::Data, &report)?;
            out.finish("compare-actiongen")?;
            return Err(CliError::invariant(format!(
                "variants disagree at n={n} (first differing lane/step {diff:?}); see equivalence_failure.json"
            )));
        }
        for (name, r) in &results {
            let c = LoopCounters::of(r);
            rows.push(vec![
                name.to_string(),
                n.to_string(),
                num(r.latency.action_gen_ms),
                c.alloc_count.to_string(),
                c.dispatch_count.to_string(),
                c.replay_count.to_string(),
            ]);
            counter_rows.push(vec![
                name.to_string(),
                n.to_string(),
                c.alloc_count.to_string(),
                c.dispatch_count.to_string(),
                c.replay_count.to_string(),
                c.kv_allocs.to_string(),
                c.replay_region_dispatch_count.to_string(),
                r.trajectory_digest(),
            ]);
        }
        let ms: Vec<f64> = results.iter().map(|(_, r)| r.latency.action_gen_ms).collect();
        let pct = |v: f64| if ms[0] > 0.0 { (1.0 - v / ms[0]) * 100.0 } else { 0.0 };
        println!(
            "n={n}: baseline {:.2} ms, +static_kv {:.2} ms ({:.1}%), +graph {:.2} ms ({:.1}%)",
            ms[0],
            ms[1],
            pct(ms[1]),
            ms[2],
            pct(ms[2])
        );
        reductions.push(Reduction {
            n,
            baseline_ms: ms[0],
            static_kv_ms: ms[1],
            graph_ms: ms[2],
            static_kv_reduction_pct: pct(ms[1]),
            graph_reduction_pct: pct(ms[2]),
        });
    }

    out.csv(
        "compare.csv",
        Kind::Timing,
        &[
            "variant",
            "n",
            "action_gen_ms",
            "alloc_count",
            "dispatch_count",
            "replay_count",
        ],
        &rows,
    )?;
    out.csv(
        "compare_counters.csv",
        Kind::Data,
        &[
            "variant",
            "n",
            "alloc_count",
            "dispatch_count",
            "replay_count",
            "kv_allocs",
            "replay_region_dispatch_count",
            "trajectory_digest",
        ],
        &counter_rows,
    )?;
    out.json("reduction.json", Kind::Timing, &reductions)?;
    out.finish("compare-actiongen")
}
