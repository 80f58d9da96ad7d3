use std::collections::BTreeMap;

use minivla_core::pipeline::{InferenceResult, Topology};
use minivla_core::profiler::{actiongen_proportion, tokens_per_second, LatencyComponent, ScalingReport};
use serde::Serialize;

use crate::args::ProfileArgs;
use crate::config::load_scenario;
use crate::error::{CliError, Failure, ResultExt};
use crate::output::{num, Kind, Output};

/// Components whose N_max / N=1 ratio stays within this band are flagged constant.
pub const CONSTANT_BAND: f64 = 0.2;

pub fn classify(factor: f64) -> &'static str {
    if (factor - 1.0).abs() <= CONSTANT_BAND {
        "constant"
    } else {
        "scaling"
    }
}

#[derive(Debug, Serialize)]
struct TopologyScaling {
    topology: Topology,
    #[serde(flatten)]
    report: ScalingReport,
    flags: BTreeMap<LatencyComponent, &'static str>,
    actiongen_proportion: Vec<f64>,
    decode_tokens_per_second: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    sweep: Vec<usize>,
    topologies: Vec<Topology>,
    repeats: usize,
    trajectory_digests: BTreeMap<String, String>,
    /// Single and multi agree bitwise at N=1; present when both ran.
    topology_equivalent_at_1: Option<bool>,
}

const SWEEP_HEADER: &[&str] = &[
    "topology",
    "kv",
    "executor",
    "n",
    "repeats",
    "preprocessing_ms",
    "reasoning_vision_ms",
    "reasoning_prefill_ms",
    "reasoning_decode_ms",
    "action_gen_ms",
    "total_ms",
    "action_gen_proportion",
    "alloc_count",
    "dispatch_count",
    "replay_count",
    "kv_bytes",
    "cot_tokens",
];

pub fn run(args: &ProfileArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    cfg.validate_sweep()?;
    let scenario = load_scenario(args.run.scenario.as_deref())?;
    let mut engine = cfg.engine()?;
    let topologies = if args.both_topologies {
        vec![Topology::Single, Topology::Multi]
    } else {
        vec![cfg.topology]
    };

    let mut sweep_rows = Vec::new();
    let mut counter_rows = Vec::new();
    let mut iter_rows = Vec::new();
    let mut scaling = Vec::new();
    let mut digests = BTreeMap::new();
    let mut at_one: Vec<(Topology, InferenceResult)> = Vec::new();

    let mut reqs = Vec::new();
    for &topology in &topologies {
        for &n in &cfg.sweep {
            let mut req = cfg.request(&scenario);
            req.topology = topology;
            req.num_trajectories = n;
            reqs.push(req);
        }
    }
    let mut results = engine.profile_sweep(&reqs, cfg.repeats)?.into_iter();

    for &topology in &topologies {
        let mut points = Vec::new();
        for &n in &cfg.sweep {
            let r = results.next().expect("one result per request");
            let l = &r.latency;
            log::info!(
                "{topology} n={n}: total {:.2} ms, action_gen {:.2} ms",
                l.total_ms,
                l.action_gen_ms
            );
            let mut row = vec![
                topology.to_string(),
                cfg.kv_strategy.to_string(),
                cfg.executor.to_string(),
                n.to_string(),
                l.repeats.to_string(),
            ];
            row.extend(LatencyComponent::ALL.iter().map(|&c| num(l.component_ms(c))));
            row.push(num(l.total_ms));
            row.push(num(actiongen_proportion(l)));
            let counters = [l.alloc_count, l.dispatch_count, l.replay_count, l.kv_bytes];
            row.extend(counters.iter().map(u64::to_string));
            row.push(l.cot_tokens.to_string());
            sweep_rows.push(row);

            let digest = r.trajectory_digest();
            let mut crow = vec![topology.to_string(), n.to_string()];
            crow.extend(counters.iter().map(u64::to_string));
            crow.push(l.cot_tokens.to_string());
            crow.push(digest.clone());
            counter_rows.push(crow);
            digests.insert(format!("{topology}/{n}"), digest);

            for (t, ms) in r.diagnostics.iterations.iter().zip(&l.action_gen_iter_ms) {
                iter_rows.push(vec![
                    topology.to_string(),
                    n.to_string(),
                    t.iteration.to_string(),
                    format!("{:?}", t.mode).to_lowercase(),
                    num(*ms),
                ]);
            }
            points.push((n, r.latency.clone()));
            if n == 1 {
                at_one.push((topology, r));
            }
        }
        let report = ScalingReport::from_sweep(&points).or_fail(Failure::Invariant)?;
        let flags = report.scaling_factor.iter().map(|(&c, &f)| (c, classify(f))).collect();
        let tps = points
            .iter()
            .map(|(_, l)| tokens_per_second(l.cot_tokens, l.reasoning_decode_ms).unwrap_or(0.0))
            .collect();
        scaling.push(TopologyScaling {
            topology,
            report,
            flags,
            actiongen_proportion: points.iter().map(|(_, l)| actiongen_proportion(l)).collect(),
            decode_tokens_per_second: tps,
        });
    }

    let find = |t: Topology| at_one.iter().find(|(x, _)| *x == t).map(|(_, r)| r);
    let topology_equivalent_at_1 = match (find(Topology::Single), find(Topology::Multi)) {
        (Some(s), Some(m)) => Some(s.trajectory_digest() == m.trajectory_digest() && s.cot_tokens == m.cot_tokens),
        _ => None,
    };
    for s in &scaling {
        println!("{}:", s.topology);
        for (c, f) in &s.report.scaling_factor {
            println!("  {:<18} x{:.2} ({})", c.name(), f, s.flags[c]);
        }
    }
    if let Some(eq) = topology_equivalent_at_1 {
        println!("topology equivalent at N=1: {eq}");
    }

    let mut out = Output::create(&cfg.out)?;
    out.csv("sweep.csv", Kind::Timing, SWEEP_HEADER, &sweep_rows)?;
    out.csv(
        "counters.csv",
        Kind::Data,
        &[
            "topology",
            "n",
            "alloc_count",
            "dispatch_count",
            "replay_count",
            "kv_bytes",
            "cot_tokens",
            "trajectory_digest",
        ],
        &counter_rows,
    )?;
    out.csv(
        "actiongen_iters.csv",
        Kind::Timing,
        &["topology", "n", "iteration", "mode", "ms"],
        &iter_rows,
    )?;
    out.json("scaling.json", Kind::Timing, &scaling)?;
    out.json(
        "summary.json",
        Kind::Data,
        &Summary {
            sweep: cfg.sweep.clone(),
            topologies,
            repeats: cfg.repeats,
            trajectory_digests: digests,
            topology_equivalent_at_1,
        },
    )?;
    out.finish("profile")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_band() {
        assert_eq!(classify(1.0), "constant");
        assert_eq!(classify(1.19), "constant");
        assert_eq!(classify(0.81), "constant");
        assert_eq!(classify(1.5), "scaling");
    }
}
