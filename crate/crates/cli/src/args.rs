use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use netsched_core::{ContentionMode, PolicyKind};

/// Network-contention-aware GPU cluster scheduling: generate traces, train
/// placement policies, evaluate and compare schedulers.
///
/// Exit status: 0 on success, 2 for usage errors, 3 for missing or
/// malformed files, 4 for failures while simulating or training.
#[derive(Debug, Parser)]
#[command(name = "netsched", version)]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root of the output tree (traces/, checkpoints/, reports/).
    #[arg(long, global = true, env = "NETSCHED_OUTPUT_ROOT", value_name = "DIR")]
    pub output_root: Option<PathBuf>,

    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace of one or more job sets.
    GenTrace(GenTraceArgs),
    /// Train a policy network and write a checkpoint plus its training curve.
    Train(TrainArgs),
    /// Run one policy over every job set of a trace and write episode reports.
    Eval(EvalArgs),
    /// Run several policies on the same trace and write comparison data.
    Compare(CompareArgs),
    /// Print or write the calibrated CS table for the configured cluster.
    CsTable(CsTableArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct ClusterArgs {
    /// Number of nodes.
    #[arg(long, value_name = "N")]
    pub nodes: Option<u32>,
    /// GPUs per node.
    #[arg(long, value_name = "N")]
    pub gpus_per_node: Option<u32>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct TraceArgs {
    /// Built-in class mix: normal, heavy, medium or low.
    #[arg(long)]
    pub mix: Option<String>,
    /// Jobs per set.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Number of job sets.
    #[arg(long, value_name = "N")]
    pub sets: Option<usize>,
    /// `all-at-zero` or `poisson:<jobs per sim-second>`.
    #[arg(long, value_name = "PROCESS")]
    pub arrivals: Option<String>,
    /// Sim-seconds per real second.
    #[arg(long, value_name = "X")]
    pub time_scale: Option<f64>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct EpisodeArgs {
    /// Contention model: table, synthetic or disabled.
    #[arg(long, value_name = "MODE")]
    pub contention: Option<ContentionMode>,
    /// CS table CSV used in table mode instead of the built-in calibration.
    #[arg(long, value_name = "PATH")]
    pub cs_table: Option<PathBuf>,
    /// Shorthand for `--contention disabled`: every job runs at CS = 1.
    #[arg(long)]
    pub no_contention: bool,
    /// Preempt running jobs whose CS exceeds this value.
    #[arg(long, value_name = "CS")]
    pub cs_threshold: Option<f64>,
    /// Never preempt on contention.
    #[arg(long)]
    pub no_preempt: bool,
    /// Sim-seconds between scheduling rounds.
    #[arg(long, value_name = "SECS")]
    pub interval: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub trace: TraceArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; defaults to a name derived from the recipe under traces/.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct RewardArgs {
    /// Weight preset A..E (w1 = 0.3, 0.4, 0.5, 0.6, 0.7).
    #[arg(long, conflicts_with = "w1")]
    pub branch: Option<String>,
    /// Contention weight; w2 defaults to 1 - w1.
    #[arg(long)]
    pub w1: Option<f64>,
    /// Utilization weight; must equal 1 - w1.
    #[arg(long, requires = "w1")]
    pub w2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training trace; generated from the trace settings when omitted.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub gen: TraceArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[command(flatten)]
    pub reward: RewardArgs,
    #[arg(long, value_name = "N")]
    pub episodes: Option<usize>,
    /// Hidden layer width.
    #[arg(long, value_name = "N")]
    pub hidden: Option<usize>,
    /// Adam learning rate.
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run name used for the checkpoint and curve files.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// fifo-greedy, las, srtf, rl-base or rl-hybrid.
    #[arg(long)]
    pub policy: PolicyKind,
    /// Required for the RL policies.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation trace; generated from the trace settings when omitted.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub gen: TraceArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Use only the first N job sets of the trace.
    #[arg(long, value_name = "N")]
    pub limit_sets: Option<usize>,
    /// Also write the observation tensor of the first round of set 0.
    #[arg(long)]
    pub dump_tensor: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report directory name under reports/.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated policies; at least two. Repeats are allowed.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub policies: Vec<PolicyKind>,
    /// Checkpoint for the RL policies; repeat to compare several, for
    /// example one per weight branch.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Vec<PathBuf>,
    /// Evaluation trace; generated from the trace settings when omitted.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub gen: TraceArgs,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, value_name = "N")]
    pub limit_sets: Option<usize>,
    /// Bins of the utilization histograms.
    #[arg(long, default_value_t = 10, value_name = "N")]
    pub bins: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct CsTableArgs {
    #[command(flatten)]
    pub cluster: ClusterArgs,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}
