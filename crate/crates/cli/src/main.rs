mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Coded multi-branch residual networks: coding schemes, training and
/// per-class analysis.
#[derive(Debug, Parser)]
#[command(name = "coded", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Global {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every artifact of the run.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded evaluation; outputs are bit-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Architecture preset: toy, table1-cifar10, table1-cifar100, table1-imagenet.
    #[arg(long, global = true)]
    pub arch: Option<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Generate or check a class-to-branch coding scheme.
    #[command(subcommand)]
    Codebook(CodebookCommand),
    /// Train a network and save its checkpoint.
    Train(TrainArgs),
    /// Validation accuracy and per-block coding loss of a checkpoint.
    Eval(CheckpointArgs),
    /// Remove active or inactive branches of one block and re-evaluate.
    Ablate(AblateArgs),
    /// Extract, calibrate and score the binary classifier of one class.
    Extract(ExtractArgs),
    /// Accuracy of the energy-based decoder at every coded block.
    EarlyDecode(EarlyDecodeArgs),
    /// Parameter count of an architecture, optionally for one class.
    Params(ParamsArgs),
    /// Central-difference gradient check of the autodiff primitives and a
    /// coded block.
    Gradcheck(GradcheckArgs),
    /// Train baseline and coded toy networks and run every analysis.
    ToySuite,
    /// Print the default run configuration as JSON.
    DefaultConfig,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum CodebookCommand {
    Generate(GenerateArgs),
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long = "K")]
    pub k: usize,
    #[arg(long = "N")]
    pub n: usize,
    #[arg(long = "N-act")]
    pub n_act: usize,
    #[arg(long = "H-min", default_value_t = 2)]
    pub h_min: usize,
    /// Local-search move budget.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Stream candidates when the enumeration is too large to hold.
    #[arg(long)]
    pub stream: bool,
    /// Scheme file; defaults to `scheme.txt` in the output directory.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    pub path: PathBuf,
    /// Expected number of classes; defaults to the rows in the file.
    #[arg(long = "K")]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub p_drop: Option<f64>,
    /// Train every block uncoded.
    #[arg(long)]
    pub uncoded: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckpointArgs {
    /// Defaults to `model.ckpt` in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Active,
    Inactive,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long)]
    pub block: usize,
    #[arg(long, value_enum)]
    pub which: Which,
    /// Branches removed per sample; defaults to the block's active count.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long)]
    pub class: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Ratio,
    Raw,
}

#[derive(Debug, Args, Serialize)]
pub struct EarlyDecodeArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long, value_enum)]
    pub scaling: Option<Scaling>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Apportioned,
    Retained,
}

#[derive(Debug, Args, Serialize)]
pub struct ParamsArgs {
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, value_enum, default_value_t = Policy::Apportioned)]
    pub policy: Policy,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub points: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
