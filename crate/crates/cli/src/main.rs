//! `orlc`: data generation, training, coding, evaluation and RD sweeps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use orlc::loss::ObjectMseNorm;
use orlc::train::{Objective, TrainConfig};

use config::{parse_norm, parse_objective, set, ObjectiveSet};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(orlc::Error),
}

impl From<orlc::Error> for CliError {
    fn from(e: orlc::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser)]
#[command(name = "orlc", version, about = "Object-region learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train one codec.
    Train(TrainArgs),
    /// Compress a PPM image into an .orlb bitstream.
    Encode(CodecArgs),
    /// Reconstruct a PPM image from an .orlb bitstream.
    Decode(CodecArgs),
    /// PSNR of an image pair, or codec metrics over a dataset split.
    Eval(EvalArgs),
    /// Train or load one codec per λ and tabulate rate against quality.
    RdSweep(RdSweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    num_down_layers: Option<usize>,
}

/// Training fields shared by `train` and `rd-sweep`.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden_channels: Option<usize>,
    #[arg(long)]
    latent_channels: Option<usize>,
    #[arg(long)]
    num_down_layers: Option<usize>,
    /// Object-MSE denominator: total-pixels or object-pixels.
    #[arg(long, value_parser = parse_norm)]
    object_mse_norm: Option<ObjectMseNorm>,
    #[arg(long)]
    param_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    batch_seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.adam.learning_rate, self.learning_rate);
        set(&mut t.model.hidden_channels, self.hidden_channels);
        set(&mut t.model.latent_channels, self.latent_channels);
        set(&mut t.model.num_down_layers, self.num_down_layers);
        set(&mut t.object_mse_norm, self.object_mse_norm);
        set(&mut t.param_seed, self.param_seed);
        set(&mut t.noise_seed, self.noise_seed);
        set(&mut t.batch_seed, self.batch_seed);
        set(&mut t.checkpoint_every, self.checkpoint_every);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// human (alias baseline) or proposed.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct CodecArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Original image of a pair.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Reconstructed image of a pair.
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Object mask (PGM) for the pair's object PSNR.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train or val.
    #[arg(long)]
    split: Option<String>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Also train the proxy classifier and report its accuracy.
    #[arg(long)]
    proxy: bool,
    #[arg(long)]
    proxy_steps: Option<usize>,
}

#[derive(Args)]
struct RdSweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveSet>,
    /// Comma-separated λ values replacing the objective's standard grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Load `<objective>_lambda<λ>/final.orlc` runs from here instead of training.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Evaluate only the first N samples of the val split.
    #[arg(long)]
    limit: Option<usize>,
    /// Fill the acc_pre and acc_ft columns with the proxy classifier.
    #[arg(long)]
    proxy: bool,
    #[arg(long)]
    proxy_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Decode(_) => "decode",
            Command::Eval(_) => "eval",
            Command::RdSweep(_) => "rd-sweep",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::RdSweep(a) => commands::rd_sweep(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut root = Cli::command();
            root.build();
            if let Some(sub) = root.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            eprintln!("\nFor more information, try 'orlc {name} --help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
