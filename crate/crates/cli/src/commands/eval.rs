use std::path::Path;

use minivla_core::eval::{
    evaluate_case, load_dataset, simulate_closed_loop, CaseResult, CenterlinePolicy, ClosedLoopWorld, ConstantPolicy,
    EnginePlanner, EngineSampler, GroundTruthSampler, OpenLoopReport, Planner, SimError, SkippedCase,
};
use minivla_core::pipeline::{InferenceRequest, Topology};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{ClosedArgs, ClosedPolicy, OpenArgs, OpenPolicy};
use crate::config::{load_scenario, RunConfig};
use crate::error::{CliError, Failure};
use crate::output::{num, Kind, Output};

#[derive(Debug, Serialize)]
struct OpenSummary<'a> {
    policy: &'static str,
    k: usize,
    topology: Topology,
    mean_min_ade_m: f64,
    cases: &'a [CaseResult],
    skipped: &'a [SkippedCase],
}

fn sampler(cfg: &RunConfig, template: &InferenceRequest) -> Result<EngineSampler, CliError> {
    Ok(EngineSampler {
        engine: cfg.engine()?,
        template: template.clone(),
    })
}

pub fn open(args: &OpenArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    if args.k == 0 {
        return Err(CliError::config("--k must be at least 1"));
    }
    let (cases, skipped) = load_dataset(&args.dataset)?;
    if cases.is_empty() {
        return Err(CliError::new(
            Failure::Io,
            anyhow::anyhow!(
                "no readable cases in {} ({} skipped)",
                args.dataset.display(),
                skipped.len()
            ),
        ));
    }
    let template = cfg.request(&cases[0].scenario);
    let k = args.k;
    let results: Vec<CaseResult> = match args.policy {
        OpenPolicy::Gt => cases
            .iter()
            .map(|c| evaluate_case(c, &mut GroundTruthSampler, k))
            .collect::<Result<_, _>>()?,
        OpenPolicy::Engine if args.parallel => cases
            .par_iter()
            .map_init(
                || sampler(&cfg, &template).map_err(|e| e.to_string()),
                |s, case| match s {
                    Ok(s) => evaluate_case(case, s, k).map_err(CliError::from),
                    Err(msg) => Err(CliError::config(msg.clone())),
                },
            )
            .collect::<Result<_, _>>()?,
        OpenPolicy::Engine => {
            let mut s = sampler(&cfg, &template)?;
            cases
                .iter()
                .map(|c| evaluate_case(c, &mut s, k))
                .collect::<Result<_, _>>()?
        }
    };
    let report = OpenLoopReport::from_cases(k, results, skipped.len())?;

    let mut rows: Vec<Vec<String>> = report
        .cases
        .iter()
        .map(|c| vec![c.case_id.clone(), num(c.min_ade_m)])
        .collect();
    rows.push(vec!["mean".into(), num(report.mean_min_ade_m)]);
    println!(
        "minADE_{k}: mean {:.4} m over {} cases ({} skipped)",
        report.mean_min_ade_m,
        report.cases.len(),
        report.skipped
    );

    let mut out = Output::create(&cfg.out)?;
    out.csv("open_loop.csv", Kind::Data, &["case_id", "min_ade_m"], &rows)?;
    out.json(
        "open_loop_summary.json",
        Kind::Data,
        &OpenSummary {
            policy: match args.policy {
                OpenPolicy::Engine => "engine",
                OpenPolicy::Gt => "gt",
            },
            k,
            topology: cfg.topology,
            mean_min_ade_m: report.mean_min_ade_m,
            cases: &report.cases,
            skipped: &skipped,
        },
    )?;
    out.finish("eval open")
}

fn planner(args: &ClosedArgs, cfg: &RunConfig) -> Result<Box<dyn Planner>, CliError> {
    Ok(match args.policy {
        ClosedPolicy::Straight => Box::new(ConstantPolicy::straight()),
        ClosedPolicy::Curvature => Box::new(ConstantPolicy::curvature(args.curvature)),
        ClosedPolicy::Centerline => Box::new(CenterlinePolicy::default()),
        ClosedPolicy::Engine => {
            let scenario = load_scenario(args.run.scenario.as_deref())?;
            Box::new(EnginePlanner {
                engine: cfg.engine()?,
                template: cfg.request(&scenario),
            })
        }
    })
}

fn scenario_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn closed(args: &ClosedArgs) -> Result<(), CliError> {
    let cfg = args.run.resolve()?;
    if !args.curvature.is_finite() {
        return Err(CliError::config("--curvature must be finite"));
    }
    let mut out = Output::create(&cfg.out)?;
    let mut rows = Vec::new();
    let mut dtfs = Vec::new();
    for path in &args.worlds {
        let id = scenario_id(path);
        let world = ClosedLoopWorld::load(path)?;
        let mut policy = planner(args, &cfg)?;
        let outcome = match simulate_closed_loop(&world, policy.as_mut(), args.selector) {
            Ok(o) => o,
            Err(e) => {
                if let SimError::Policy { trace, .. } | SimError::BadPlan { trace, .. } = &e {
                    out.json(&format!("trace_{id}.failed.json"), Kind::Data, trace)?;
                    out.finish("eval closed")?;
                }
                return Err(e.into());
            }
        };
        println!(
            "{id}: DTF {:.2} m, failure {}{}",
            outcome.dtf,
            outcome.failure.kind,
            outcome
                .failure
                .step
                .map(|s| format!(" at step {s}"))
                .unwrap_or_default()
        );
        rows.push(vec![
            id.clone(),
            num(outcome.dtf),
            outcome.failure.kind.to_string(),
            outcome.failure.step.map(|s| s.to_string()).unwrap_or_default(),
        ]);
        dtfs.push(outcome.dtf);
        out.json(&format!("trace_{id}.json"), Kind::Data, &outcome)?;
    }
    let mean = dtfs.iter().sum::<f64>() / dtfs.len() as f64;
    rows.push(vec!["mean".into(), num(mean), String::new(), String::new()]);
    out.csv(
        "closed_loop.csv",
        Kind::Data,
        &["scenario_id", "dtf_m", "failure_kind", "failure_step"],
        &rows,
    )?;
    out.finish("eval closed")
}
