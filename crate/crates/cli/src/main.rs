//! `meco`: train meta-cognition probes, fit decision policies, evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use meco_core::LayerWindow;

#[derive(Debug, Parser)]
#[command(
    name = "meco",
    version,
    about = "Meta-cognition probes for adaptive tool use"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic activation containers or scored items.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Fit one probe per layer from a contrastive MACT1 container.
    TrainProbe(TrainProbeArgs),
    /// Show per-layer probe accuracies and the layer selected for scoring.
    ProbeReport(ProbeReportArgs),
    /// Fit a MeCo or Yes-score policy on validation items.
    FitPolicy(FitPolicyArgs),
    /// Apply a policy to scored items.
    Decide(DecideArgs),
    /// Compare Naive against fitted policies on a benchmark.
    Evaluate(EvaluateArgs),
    /// Histogram first-token meta-cognition scores.
    DistReport(DistReportArgs),
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Contrastive records with a planted concept direction.
    Planted(SynthPlantedArgs),
    /// Scored items from Gaussian score populations with a known optimum.
    Mixture(SynthMixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyChoice {
    Meco,
    PYes,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Metatool,
    MecaTool,
    MecaRag,
}

/// Probe-based scoring inputs shared by several subcommands.
#[derive(Debug, Clone, Args)]
struct ScoringArgs {
    /// Probe manifest written by `train-probe`.
    #[arg(long, requires = "activations")]
    probes: Option<PathBuf>,
    /// MACT1 container of first-token activations (query_id = item_id).
    #[arg(long, requires = "probes")]
    activations: Option<PathBuf>,
    /// Layer window used to pick the scoring probe, counted from the end.
    #[arg(long, default_value = "-5..-2", allow_hyphen_values = true)]
    layer_window: LayerWindow,
    /// Score at this layer instead of selecting one from the window.
    #[arg(long)]
    layer: Option<u32>,
}

#[derive(Debug, Args)]
struct SynthPlantedArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 512)]
    pairs: usize,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Number of layers; every layer carries the same planted direction.
    #[arg(long, default_value_t = 1)]
    layers: u32,
    #[arg(long, default_value_t = 1)]
    truncations: u32,
    #[arg(long, default_value = "synthetic")]
    model_id: String,
    /// Write the JSON-lines debug form instead of binary MACT1.
    #[arg(long)]
    debug_jsonl: bool,
    /// Also write the planted direction as JSON.
    #[arg(long)]
    direction_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthMixtureArgs {
    /// Scored-item JSONL.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// JSON mixture spec; defaults to a built-in example.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Matching benchmark JSONL.
    #[arg(long)]
    benchmark_output: Option<PathBuf>,
    /// Bayes-optimal thresholds and accuracy as JSON.
    #[arg(long)]
    oracle_output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "metatool")]
    suite: SuiteArg,
    /// First item id; lets several synthetic sets share one benchmark.
    #[arg(long, default_value_t = 0)]
    id_offset: u64,
}

#[derive(Debug, Args)]
struct TrainProbeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Probe manifest path; the float32 blob goes next to it with `.bin`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = meco_core::probe::DEFAULT_SPLIT_FRACTION)]
    split_fraction: f64,
    /// Where to save the accuracy table; defaults to `<output>.accuracy.<format>`.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Debug, Args)]
struct ProbeReportArgs {
    /// Probe manifest.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "-5..-2", allow_hyphen_values = true)]
    layer_window: LayerWindow,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitPolicyArgs {
    /// Scored validation items (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Policy JSON.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "meco")]
    policy: PolicyChoice,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Name recorded as the fitting dataset; defaults to the input file stem.
    #[arg(long)]
    dataset_id: Option<String>,
}

#[derive(Debug, Args)]
struct DecideArgs {
    #[arg(long)]
    input: PathBuf,
    /// Policy JSON from `fit-policy`.
    #[arg(long)]
    policy: PathBuf,
    /// Decision JSONL.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Reject first tokens other than Yes/No; `false` coerces them to Yes.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    strict_tokens: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Scored test items (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Benchmark JSONL the items belong to.
    #[arg(long)]
    benchmark: PathBuf,
    /// Fitted policies to compare against Naive; repeatable.
    #[arg(long)]
    policy: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Comma-separated subset of `suite,task,context_mode`, or `none`.
    #[arg(long, default_value = "suite,task,context_mode")]
    group_by: String,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    strict_tokens: bool,
    /// Label for the evaluated suite in transfer summaries.
    #[arg(long)]
    eval_suite: Option<String>,
}

#[derive(Debug, Args)]
struct DistReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// One histogram per layer (needs --probes and --activations).
    #[arg(long)]
    all_layers: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
