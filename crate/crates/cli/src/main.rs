//! `deltamerge` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deltamerge_core::{Error, ErrorClass};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage error (bad flags, invalid recipe or configuration)
  2  data or format error (unreadable file, malformed checkpoint, schema mismatch)
  3  numeric failure (divergence, non-finite values)";

#[derive(Debug, Parser)]
#[command(name = "deltamerge", version, about = "Delta extraction, sparsification and merging for checkpoints", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge deltas into a base checkpoint.
    #[command(after_help = EXIT_CODES)]
    Merge(MergeArgs),
    /// Extract a delta (fine-tuned minus base) or compose one from a LoRA adapter.
    #[command(after_help = EXIT_CODES)]
    Delta(DeltaArgs),
    /// Report per-layer and average sparsity of a delta.
    #[command(after_help = EXIT_CODES)]
    Sparsity(SparsityArgs),
    /// Sparsify a delta by drop-and-rescale, top-k trimming or thresholding.
    #[command(after_help = EXIT_CODES)]
    Sparsify(SparsifyArgs),
    /// Train a delta on a toy network.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Run the experiment matrix and write JSON and text reports.
    #[command(after_help = EXIT_CODES)]
    Experiment(ExperimentArgs),
    /// Print a checkpoint header without reading the payload.
    #[command(after_help = EXIT_CODES)]
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// JSON recipe file; delta and base paths resolve against its directory.
    /// Cannot be combined with the inline merge flags.
    #[arg(long, value_name = "FILE")]
    recipe: Option<PathBuf>,
    /// Merge method: linear, task_arithmetic, ties, dare_ties or slerp.
    #[arg(long, value_name = "M")]
    method: Option<String>,
    /// Base checkpoint.
    #[arg(long, value_name = "FILE")]
    base: Option<PathBuf>,
    /// Delta checkpoint with optional weight (default weight 1.0). Repeatable.
    #[arg(long = "delta", value_name = "FILE[:W]")]
    deltas: Vec<String>,
    /// TIES trim density in (0, 1] [default: 0.5].
    #[arg(long, value_name = "K")]
    density: Option<f64>,
    /// DARE drop probability in [0, 1) [default: 0.5].
    #[arg(long, value_name = "P")]
    drop: Option<f64>,
    /// DARE seed [default: 0].
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// SLERP interpolation factor in [0, 1] [default: 0.5].
    #[arg(long, value_name = "T")]
    t: Option<f64>,
    /// Trim granularity for TIES: per_tensor or global [default: per_tensor].
    #[arg(long, value_name = "G")]
    granularity: Option<String>,
    /// SLERP angle scope: global or per_tensor [default: global].
    #[arg(long, value_name = "MODE")]
    slerp_mode: Option<String>,
    /// Normalize weights to sum 1: true or false [default: true for linear, false for task_arithmetic].
    #[arg(long, value_name = "BOOL")]
    normalize_weights: Option<bool>,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DeltaArgs {
    /// Fine-tuned checkpoint.
    #[arg(long, value_name = "FILE", requires = "pre", conflicts_with = "lora")]
    ft: Option<PathBuf>,
    /// Base checkpoint the fine-tuned one started from.
    #[arg(long, value_name = "FILE", requires = "ft")]
    pre: Option<PathBuf>,
    /// LoRA adapter checkpoint (`<layer>.lora_a` / `<layer>.lora_b` tensors).
    #[arg(long, value_name = "FILE")]
    lora: Option<PathBuf>,
    /// LoRA scaling when the adapter has none in its metadata.
    #[arg(long, value_name = "S", default_value_t = 1.0)]
    scaling: f64,
    /// Skip names present on only one side instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Output delta checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SparsityArgs {
    /// Delta checkpoint.
    #[arg(long, value_name = "FILE")]
    delta: PathBuf,
    /// Magnitudes strictly below this count as zero; must be positive.
    #[arg(long, value_name = "T", default_value_t = deltamerge_core::delta::DEFAULT_SPARSITY_THRESHOLD)]
    threshold: f64,
    /// Weight layers by element count instead of averaging them uniformly.
    #[arg(long)]
    element_weighted: bool,
}

#[derive(Debug, Args)]
struct SparsifyArgs {
    /// Delta checkpoint.
    #[arg(long, value_name = "FILE")]
    delta: PathBuf,
    /// Method: dare, trim_topk or threshold.
    #[arg(long, value_name = "M")]
    method: String,
    /// Drop probability for dare.
    #[arg(long, value_name = "P")]
    p: Option<f64>,
    /// Seed for dare.
    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,
    /// Kept fraction for trim_topk.
    #[arg(long, value_name = "K")]
    k: Option<f64>,
    /// Ranking scope for trim_topk: per_tensor or global.
    #[arg(long, value_name = "G", default_value = "per_tensor")]
    granularity: String,
    /// Magnitude cutoff for threshold.
    #[arg(long, value_name = "TAU")]
    tau: Option<f64>,
    /// Output delta checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Objective: sft, sft_sparse, dpo or orpo.
    #[arg(long, value_name = "O")]
    objective: String,
    /// Training data in the text grammar; generated from --data-seed when omitted.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Seed for the generated benchmark.
    #[arg(long, value_name = "S", default_value_t = 0)]
    data_seed: u64,
    /// Base network checkpoint; a random network is built when omitted.
    #[arg(long, value_name = "FILE")]
    base: Option<PathBuf>,
    /// Layer sizes of the random network.
    #[arg(long, value_name = "N,N,..", value_delimiter = ',', default_value = "8,16,4")]
    layers: Vec<usize>,
    /// Weight init scale of the random network.
    #[arg(long, value_name = "X", default_value_t = 0.75)]
    init_scale: f64,
    /// Seed of the random network.
    #[arg(long, value_name = "S", default_value_t = 0)]
    net_seed: u64,
    /// Also write the base network checkpoint here.
    #[arg(long, value_name = "FILE")]
    save_base: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long, value_name = "N", default_value_t = 500)]
    steps: usize,
    /// Learning rate.
    #[arg(long, value_name = "LR", default_value_t = 0.5)]
    lr: f64,
    /// L1 coefficient for sft_sparse.
    #[arg(long, value_name = "L", default_value_t = 1e-3)]
    lambda: f64,
    /// Preference temperature for dpo and orpo.
    #[arg(long, value_name = "B", default_value_t = 1.0)]
    beta: f64,
    /// Seed for minibatch sampling and adapter init.
    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,
    /// Optimizer: sgd or sgd_momentum.
    #[arg(long, value_name = "OPT", default_value = "sgd")]
    optimizer: String,
    /// L1 update: proximal or subgradient.
    #[arg(long, value_name = "MODE", default_value = "proximal")]
    l1_step: String,
    /// Minibatch size; full batch when omitted.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Train a LoRA adapter of this rank instead of a dense delta.
    #[arg(long, value_name = "R")]
    lora_rank: Option<usize>,
    /// Output delta checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment configuration JSON; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the seed list with 0..N.
    #[arg(long, value_name = "N")]
    seeds: Option<u64>,
    /// JSON report path.
    #[arg(long, value_name = "FILE", default_value = "report.json")]
    json: PathBuf,
    /// Text table path.
    #[arg(long, value_name = "FILE", default_value = "report.txt")]
    table: PathBuf,
    /// Print the built-in default configuration and exit.
    #[arg(long)]
    print_default: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint file.
    #[arg(value_name = "FILE")]
    file: PathBuf,
}

/// Errors surfaced to the user, each with one exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Merge(a) => commands::merge(a),
        Command::Delta(a) => commands::delta(a),
        Command::Sparsity(a) => commands::sparsity(a),
        Command::Sparsify(a) => commands::sparsify(a),
        Command::Train(a) => commands::train(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
