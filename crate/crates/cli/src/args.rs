use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minivla_core::eval::Selector;
use minivla_core::kv::KvStrategy;
use minivla_core::model::{Executor, SampleMode};
use minivla_core::pipeline::Topology;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "minivla",
    version,
    about = "Reasoning-to-action inference runtime and evaluation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one inference and write the result.
    Generate(RunArgs),
    /// Sweep the number of trajectories and report per-component latency.
    Profile(ProfileArgs),
    /// Compare action generation across KV strategies and executors.
    CompareActiongen(RunArgs),
    /// Open-loop or closed-loop evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print the resolved configuration as JSON.
    PrintConfig(RunArgs),
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario JSON; defaults to procedural 56×56 frames.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long = "num-traj")]
    pub num_traj: Option<usize>,
    /// multi | single
    #[arg(long)]
    pub topology: Option<Topology>,
    /// dynamic | static
    #[arg(long)]
    pub kv: Option<KvStrategy>,
    /// eager | graph
    #[arg(long)]
    pub executor: Option<Executor>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub action_seed: Option<u64>,
    /// greedy | stochastic
    #[arg(long)]
    pub sample_mode: Option<SampleMode>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Generate exactly max-new-tokens CoT tokens.
    #[arg(long)]
    pub force_cot_length: bool,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated trajectory counts.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    #[arg(long)]
    pub dispatch_overhead_us: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        apply!(num_traj => num_trajectories, topology => topology, kv => kv_strategy, executor => executor,
            seed => seed, sample_mode => sample_mode, repeats => repeats, sweep => sweep,
            dispatch_overhead_us => dispatch_overhead_us, out => out);
        if self.action_seed.is_some() {
            c.action_seed = self.action_seed;
        }
        if self.max_new_tokens.is_some() {
            c.max_new_tokens = self.max_new_tokens;
        }
        if self.force_cot_length {
            c.stop_on_termination = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Sweep both topologies instead of the configured one.
    #[arg(long)]
    pub both_topologies: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// minADE over a dataset manifest.
    Open(OpenArgs),
    /// Distance to failure in one or more world files.
    Closed(ClosedArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpenPolicy {
    Engine,
    /// Return the ground truth; checks the harness.
    Gt,
}

#[derive(Debug, Args)]
pub struct OpenArgs {
    /// Manifest of `{"cases": [{"id", "path"}]}`.
    pub dataset: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Samples per case.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = OpenPolicy::Engine)]
    pub policy: OpenPolicy,
    /// Evaluate cases on separate engines in parallel.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClosedPolicy {
    Engine,
    /// Pure pursuit of the centerline.
    Centerline,
    Straight,
    /// Constant curvature from `--curvature`.
    Curvature,
}

#[derive(Debug, Args)]
pub struct ClosedArgs {
    /// World JSON files.
    #[arg(required = true)]
    pub worlds: Vec<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = ClosedPolicy::Engine)]
    pub policy: ClosedPolicy,
    #[arg(long, default_value_t = 0.05)]
    pub curvature: f32,
    /// lane0 | min-lateral
    #[arg(long, default_value = "lane0")]
    pub selector: Selector,
}
