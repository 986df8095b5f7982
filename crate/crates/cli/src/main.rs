mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfad::ErrorKind;

#[derive(Parser)]
#[command(name = "rfad", version, about = "Dataset distillation with random-feature NNGP kernels")]
struct Cli {
    /// Worker threads for the compute pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a coreset and write a checkpoint, manifest and history.
    Distill(DistillArgs),
    /// Evaluate a checkpoint with kernel ridge regression on the test split.
    Eval(EvalArgs),
    /// Rank coreset elements and training points by influence on one test point.
    Influence(InfluenceArgs),
    /// Time the distillation step over coreset sizes and model counts.
    Bench(BenchArgs),
    /// Train finite networks on a checkpoint over a hyperparameter grid.
    Transfer(TransferArgs),
}

#[derive(Args)]
pub struct DistillArgs {
    /// TOML file with `dataset` and a `[distill]` table; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Images per class.
    #[arg(long)]
    pub ipc: Option<usize>,
    #[arg(long = "n-nets")]
    pub n_nets: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Fraction of coreset entries frozen at random noise.
    #[arg(long)]
    pub rho: Option<f64>,
    /// `platt` or `mse`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub learn_labels: bool,
    #[arg(long)]
    pub no_transform: bool,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_period: Option<usize>,
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long)]
    pub validation_models: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/distill")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// `empirical`, `exact-fc-nngp` or `exact-fc-ntk`.
    #[arg(long, default_value = "empirical")]
    pub kernel: String,
    #[arg(long, default_value_t = 16)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 256)]
    pub channels_eval: usize,
    /// Number of evaluation ensembles (seeds 0..n).
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Evaluate on the first N test points; 0 uses all.
    #[arg(long, default_value_t = 0)]
    pub test_size: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lambda0: f64,
    /// CSV output; defaults to `eval.csv` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InfluenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub test_index: Option<usize>,
    /// Whitespace-separated raw pixel values in [0, 1].
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Training points in the similarity table; 0 uses all.
    #[arg(long, default_value_t = 2000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 4)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 128)]
    pub channels_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[arg(long, default_value_t = 5e-3)]
    pub lambda0: f64,
    /// Defaults to `$RFAD_CACHE_DIR`, else `.rfad-cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 50, 100, 200, 500])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    pub models: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 1280)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub repeats: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Exact kernel entries timed for the KIP cost model.
    #[arg(long, default_value_t = 4)]
    pub kip_entries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-1, 1e-2, 1e-3, 1e-4])]
    pub lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1e-3])]
    pub wds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 8.0, 16.0])]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub no_centering: bool,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1024)]
    pub channels: usize,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 300)]
    pub patience: usize,
    #[arg(long, default_value_t = 25)]
    pub eval_period: usize,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub validation_size: usize,
    /// Score on the first N test points; 0 uses all.
    #[arg(long, default_value_t = 0)]
    pub test_size: usize,
    #[arg(long, default_value = "transfer.csv")]
    pub out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Distill(a) => commands::distill(a),
        Command::Eval(a) => commands::eval(a),
        Command::Influence(a) => commands::influence(a),
        Command::Bench(a) => commands::bench(a),
        Command::Transfer(a) => commands::transfer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
