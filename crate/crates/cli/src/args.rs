use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rpolab_core::{InitMode, Method, PolicyClass};

#[derive(Parser, Debug)]
#[command(name = "rpolab", version, about = "Reward-partitioning policy optimization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic prompt space and triplet dataset.
    GenData(GenDataArgs),
    /// Train one policy and write metrics plus checkpoints.
    Train(TrainArgs),
    /// Recompute metrics for a saved checkpoint.
    Eval(EvalArgs),
    /// Train every (method, tau, seed) combination and compare them.
    Sweep(SweepArgs),
    /// Compare finished runs from their checkpoints.
    Compare(CompareArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardLawArg {
    Normal,
    Linear,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub prompts: usize,
    #[arg(long, default_value_t = 6)]
    pub responses: usize,
    /// Fraction of each prompt's candidates that appear in the data.
    #[arg(long, default_value_t = 1.0)]
    pub coverage: f64,
    /// Copies of each observed (prompt, response) pair.
    #[arg(long, default_value_t = 1)]
    pub duplication: usize,
    #[arg(long, default_value_t = 0)]
    pub feature_dim: usize,
    #[arg(long, value_enum, default_value_t = RewardLawArg::Normal)]
    pub reward_law: RewardLawArg,
    /// Noise scale of the linear reward law.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: rpolab_core::Error| e.to_string())
}

fn parse_class(s: &str) -> Result<PolicyClass, String> {
    s.parse().map_err(|e: rpolab_core::Error| e.to_string())
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    s.parse().map_err(|e: rpolab_core::Error| e.to_string())
}

/// Where the frozen reference policy comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum RefSpec {
    Uniform,
    Random(u64),
    Checkpoint(PathBuf),
}

impl std::fmt::Display for RefSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RefSpec::Uniform => f.write_str("uniform"),
            RefSpec::Random(seed) => write!(f, "random:{seed}"),
            RefSpec::Checkpoint(path) => write!(f, "ckpt:{}", path.display()),
        }
    }
}

fn parse_ref(s: &str) -> Result<RefSpec, String> {
    if s == "uniform" {
        return Ok(RefSpec::Uniform);
    }
    if let Some(seed) = s.strip_prefix("random:") {
        return seed
            .parse()
            .map(RefSpec::Random)
            .map_err(|_| format!("invalid seed in '{s}'"));
    }
    if let Some(path) = s.strip_prefix("ckpt:") {
        if path.is_empty() {
            return Err("ckpt: needs a path".into());
        }
        return Ok(RefSpec::Checkpoint(PathBuf::from(path)));
    }
    Err(format!(
        "unknown reference '{s}' (valid: uniform, random:<seed>, ckpt:<path>)"
    ))
}

/// Data inputs and every training hyperparameter.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub warmup: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Use every record at every step.
    #[arg(long)]
    pub full_batch: bool,
    #[arg(long, value_parser = parse_class, default_value = "tabular")]
    pub policy: PolicyClass,
    /// Hidden width of the featurized policy.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, value_parser = parse_init, default_value = "copy-reference")]
    pub init: InitMode,
    /// uniform | random:<seed> | ckpt:<path>
    #[arg(long = "ref", value_parser = parse_ref, default_value = "uniform")]
    pub reference: RefSpec,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_u: f64,
    /// KTO desirability threshold on standardized rewards.
    #[arg(long, default_value_t = 0.0)]
    pub kto_threshold: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sft_threshold: f64,
    /// Sum each distinct (prompt, response) pair once in the partition estimate.
    #[arg(long)]
    pub dedup_partition: bool,
    /// Re-estimate the partition at every step.
    #[arg(long)]
    pub recompute_partition: bool,
    /// Alternate DRO policy and value updates instead of a joint step.
    #[arg(long)]
    pub dro_alternating: bool,
    #[arg(long, default_value_t = 50)]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Learning rate 1e-4 with 150 warmup steps.
    #[arg(long)]
    pub paper_lr: bool,
    /// Record elapsed milliseconds in metric rows.
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub space: PathBuf,
    /// Reference policy; defaults to reference.json next to the checkpoint.
    #[arg(long = "ref", value_parser = parse_ref)]
    pub reference: Option<RefSpec>,
    /// Method for policy-only checkpoints.
    #[arg(long, value_parser = parse_method, default_value = "rpo")]
    pub method: Method,
    /// Temperature for policy-only checkpoints.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Hidden width for building a featurized reference.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Append the row to this metrics CSV.
    #[arg(long)]
    pub append: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_parser = parse_method, value_delimiter = ',', default_value = "rpo,dro")]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,5")]
    pub tau_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Checkpoint files, or directories searched for checkpoint.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub space: PathBuf,
    /// Directory for comparison.csv and plot data; prints to stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
