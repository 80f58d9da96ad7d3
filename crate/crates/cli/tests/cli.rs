use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn minivla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minivla"))
        .args(args)
        .output()
        .expect("spawn minivla")
}

fn ok(args: &[&str]) -> String {
    let o = minivla(args);
    assert!(
        o.status.success(),
        "minivla {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .collect::<Result<_, _>>()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_defaults_to_one_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--max-new-tokens", "12", "--out", s(dir.path())]);
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["num_trajectories"], 1);
    assert_eq!(r["trajectories"].as_array().unwrap().len(), 1);
    assert_eq!(r["trajectories"][0].as_array().unwrap().len(), 64);
    let meta = json(&dir.path().join("metadata.json"));
    assert_eq!(meta["data_files"][0], "result.json");
    assert_eq!(meta["timing_files"][0], "latency.json");
}

#[test]
fn single_topology_shares_one_reasoning() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixtures().join("demo_scenario.json");
    ok(&[
        "generate",
        "--scenario",
        s(&scenario),
        "--num-traj",
        "6",
        "--topology",
        "single",
        "--max-new-tokens",
        "12",
        "--out",
        s(dir.path()),
    ]);
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["reasonings"].as_array().unwrap().len(), 1);
    assert_eq!(r["trajectories"].as_array().unwrap().len(), 6);
}

#[test]
fn graph_with_dynamic_kv_is_a_config_error() {
    let o = minivla(&[
        "generate",
        "--executor",
        "graph",
        "--kv",
        "dynamic",
        "--out",
        "/nonexistent",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("static"), "{err}");
}

#[test]
fn missing_scenario_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = minivla(&[
        "generate",
        "--scenario",
        "/no/such/scenario.json",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scenario.json"));
}

#[test]
fn bad_sweep_is_a_config_error() {
    let o = minivla(&["profile", "--sweep", "2,3", "--out", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_config_matches_fixture() {
    let out = ok(&["print-config"]);
    let printed: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(printed, json(&fixtures().join("run_config.json")));
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_trajectories": 3, "topology": "multi"}"#).unwrap();
    let printed: Value = serde_json::from_str(&ok(&["print-config", "--config", s(&cfg), "--seed", "9"])).unwrap();
    assert_eq!(printed["num_trajectories"], 3);
    assert_eq!(printed["topology"], "multi");
    assert_eq!(printed["seed"], 9);

    fs::write(&cfg, r#"{"num_trajectorys": 3}"#).unwrap();
    assert_eq!(minivla(&["print-config", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn profile_reports_topology_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "profile",
        "--sweep",
        "1,2",
        "--both-topologies",
        "--repeats",
        "3",
        "--max-new-tokens",
        "8",
        "--out",
        s(dir.path()),
    ]);
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["topology_equivalent_at_1"], true);
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| &r[4] == "3"));
    let scaling = json(&dir.path().join("scaling.json"));
    assert_eq!(scaling.as_array().unwrap().len(), 2);
}

#[test]
fn compare_counts_allocations_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "compare-actiongen",
        "--sweep",
        "1",
        "--repeats",
        "1",
        "--max-new-tokens",
        "8",
        "--out",
        s(dir.path()),
    ]);
    let rows = csv_rows(&dir.path().join("compare_counters.csv"));
    assert_eq!(rows.len(), 3);
    let by = |v: &str| rows.iter().find(|r| &r[0] == v).unwrap().clone();
    let (baseline, static_kv, graph) = (by("baseline"), by("static_kv"), by("graph"));
    assert!(baseline[5].parse::<u64>().unwrap() > 0);
    assert_eq!(&static_kv[5], "0");
    assert_eq!(&graph[4], "8");
    assert_eq!(&graph[6], "8");
    assert_eq!(baseline[7], graph[7]);
    assert_eq!(static_kv[7], graph[7]);
}

#[test]
fn open_loop_ground_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("open_loop/cases.json");
    ok(&["eval", "open", s(&manifest), "--policy", "gt", "--out", s(dir.path())]);
    let rows = csv_rows(&dir.path().join("open_loop.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "mean");
    assert_eq!(rows[3][1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn open_loop_parallel_matches_sequential() {
    let manifest = fixtures().join("open_loop/cases.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let common = ["--k", "2", "--max-new-tokens", "8"];
    let mut seq = vec!["eval", "open", s(&manifest), "--out", s(a.path())];
    seq.extend(common);
    let mut par = vec!["eval", "open", s(&manifest), "--parallel", "--out", s(b.path())];
    par.extend(common);
    ok(&seq);
    ok(&par);
    assert_eq!(
        fs::read(a.path().join("open_loop.csv")).unwrap(),
        fs::read(b.path().join("open_loop.csv")).unwrap()
    );
}

#[test]
fn closed_loop_on_bundled_worlds() {
    let dir = tempfile::tempdir().unwrap();
    let worlds = fixtures().join("worlds");
    let files = ["straight_pass", "curved_failure", "obstacle"].map(|w| worlds.join(format!("{w}.json")));
    let mut args = vec!["eval", "closed", "--policy", "straight", "--out", s(dir.path())];
    args.extend(files.iter().map(|p| s(p)));
    ok(&args);
    let rows = csv_rows(&dir.path().join("closed_loop.csv"));
    let dtf = |i: usize| rows[i][1].parse::<f64>().unwrap();
    assert_eq!((&rows[0][0], dtf(0), &rows[0][2]), ("straight_pass", 100.0, "none"));
    assert_eq!(&rows[1][2], "off_drivable");
    assert!((dtf(1) - (52f64.powi(2) - 50f64.powi(2)).sqrt()).abs() < 0.5);
    assert_eq!(&rows[2][2], "collision");
    assert!((dtf(2) - 8.5).abs() < 1e-9);
    assert!(dir.path().join("trace_obstacle.json").exists());
}

#[test]
fn closed_loop_rejects_bad_world() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("bad.json");
    fs::write(
        &world,
        r#"{"centerline": [[0, 0]], "halfwidth": 2, "max_distance": 10}"#,
    )
    .unwrap();
    let o = minivla(&[
        "eval",
        "closed",
        s(&world),
        "--policy",
        "straight",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_files_are_byte_identical_across_runs() {
    let scenario = fixtures().join("demo_scenario.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        ok(&[
            "generate",
            "--scenario",
            s(&scenario),
            "--num-traj",
            "3",
            "--seed",
            "7",
            "--max-new-tokens",
            "12",
            "--out",
            s(dir.path()),
        ]);
    }
    let meta = json(&a.path().join("metadata.json"));
    for name in meta["data_files"].as_array().unwrap() {
        let name = name.as_str().unwrap();
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}
