//! `upft` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use upft::ErrorClass;

/// Exit codes: 0 ok, 1 other failure, 2 usage, 3 validation, 4 transport,
/// 5 resource limit, 6 verification failure.
#[derive(Debug, Parser)]
#[command(name = "upft", version, about = "Prefix fine-tuning datasets, bound checks and a toy-model lab")]
#[command(after_help = "Exit codes: 0 ok, 1 other, 2 usage, 3 validation, 4 transport, 5 resource limit, 6 verification")]
pub struct Cli {
    /// TOML config with sections [synth], [sampler], [sample], [pipeline],
    /// [train], [rollout], [coverage], [bounds], [eval], [experiment].
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that receives every artifact of the run.
    #[arg(long, global = true, default_value = "upft-out")]
    pub out: PathBuf,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic arithmetic corpus.
    Synth(SynthArgs),
    /// Sample trajectories for every question of a corpus.
    Sample(SampleArgs),
    /// Prefix coverage curves from sampled trajectories.
    AnalyzeCoverage(CoverageArgs),
    /// Rollout success rates along a correct and an incorrect trajectory.
    AnalyzeRollout(RolloutArgs),
    /// Exact marginal, Jensen and prefix bounds on a toy model.
    VerifyBounds(BoundsArgs),
    /// Build a UPFT / SFT / RFT / label-filtered training set.
    BuildDataset(DatasetArgs),
    /// Fine-tune a toy model on a dataset.
    TrainToy(TrainArgs),
    /// Greedy accuracy of a toy model on a corpus.
    Evaluate(EvalArgs),
    /// Run the multi-seed method comparison.
    Compare(CompareArgs),
    /// Token budget table from dataset manifests.
    Budget(BudgetArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub modulus: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub id_prefix: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplerArgs {
    /// `toy` or `remote`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Toy model checkpoint; an untrained model is used when absent.
    #[arg(long)]
    pub model_path: Option<PathBuf>,
    /// Order of the untrained fallback model.
    #[arg(long, default_value_t = 6)]
    pub order: usize,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Permit remote jobs above the configured request ceiling.
    #[arg(long)]
    pub allow_over_ceiling: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Append the prefix instruction to every prompt.
    #[arg(long)]
    pub template: bool,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Comma-separated prefix lengths.
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Defaults to the first question with both a correct and an incorrect
    /// trajectory.
    #[arg(long)]
    pub question_id: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub n_rollouts: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_completion_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Toy model checkpoint.
    #[arg(long, conflicts_with_all = ["check_report", "random_suite"])]
    pub model_path: Option<PathBuf>,
    /// Prompt text in the synthetic vocabulary.
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Prompt as comma-separated token ids (overrides --prompt).
    #[arg(long, value_delimiter = ',')]
    pub prompt_ids: Option<Vec<u32>>,
    #[arg(long)]
    pub answer: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    /// `indicator` or `smoothed`.
    #[arg(long)]
    pub likelihood: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `synthetic`, `last-number`, `boxed` or `final-token`.
    #[arg(long)]
    pub reader: Option<String>,
    /// Keep only traces that emit the end token.
    #[arg(long)]
    pub drop_unterminated: bool,
    /// Re-check a saved report instead of computing one.
    #[arg(long)]
    pub check_report: Option<PathBuf>,
    /// Verify this many seeded random small models.
    #[arg(long)]
    pub random_suite: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub suite_seed: u64,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub method: Option<String>,
    /// Prefix length.
    #[arg(long)]
    pub t: Option<usize>,
    /// Structure-tuning ratio.
    #[arg(long)]
    pub p: Option<f64>,
    /// Samples per question for label-using methods.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_sample_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Starting checkpoint; an untrained model is used when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub order: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub max_length: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub scheme: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated subset of sft,rft,upft,upft_label_filtered.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Dataset manifests written by build-dataset.
    #[arg(long = "manifest", required = true, num_args = 1..)]
    pub manifests: Vec<PathBuf>,
}

pub fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 3,
        ErrorClass::Transport => 4,
        ErrorClass::Resource => 5,
        ErrorClass::Verification => 6,
        ErrorClass::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
