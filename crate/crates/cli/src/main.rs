mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "protoseg",
    version,
    about = "Multi-prototype semi-supervised segmentation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to SSEG files plus a split manifest.
    GenData(GenDataArgs),
    /// Train one method and write metrics, parameters, checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a parameter file or checkpoint, optionally dumping PGM masks.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Run methods × labeled counts × seeds and aggregate over seeds.
    Grid(GridArgs),
}

/// Flags shared by every command that builds a training config. Each one
/// overrides the matching config-file key.
#[derive(Args, Default, Clone)]
pub struct ConfigArgs {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub num_labeled: Option<usize>,
    #[arg(long)]
    pub prototypes_per_class: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Sets both the dataset and network class counts.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub modes_per_class: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub val_images: Option<usize>,
    #[arg(long)]
    pub test_images: Option<usize>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier, interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs have run in total.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Parameter file or training checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write ground-truth, class and over-segmentation PGMs per image.
    #[arg(long)]
    pub dump_masks: bool,
    /// Evaluate (and dump) only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Add an op with a deliberately wrong backward pass.
    #[arg(long)]
    pub inject_faulty: bool,
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long = "labeled-counts", value_delimiter = ',')]
    pub labeled_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Sub-runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Grid(a) => commands::grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
