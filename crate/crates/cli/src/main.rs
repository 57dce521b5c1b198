//! `fginet`: synthesize data, train, evaluate and inspect FGI-Net models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgi_net::data::ImageFormat;
use fgi_net::eval::Protocol;
use fgi_net::{ErrorKind, Preset};

#[derive(Parser, Debug)]
#[command(name = "fginet", version, about = "FGI-Net gaze estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Structured-text file with model keys and `train.*` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyper-parameter preset.
    #[arg(long, default_value = "gaze360")]
    preset: Preset,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training manifest (CSV).
    #[arg(long, default_value = "synth/manifest.csv")]
    data: PathBuf,
    /// Optional validation manifest, evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Initial weights; the model config comes from the checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Skip unreadable manifest rows instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.ckpt` and `history.csv`.
    Train(TrainArgs),
    /// Mean angular error of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for `eval.csv` with per-sample errors.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lenient: bool,
    },
    /// Cross-validation with the preset's protocol (or `--protocol`).
    Cv {
        #[command(flatten)]
        train: TrainArgs,
        /// `loso` or `kfold:<k>`.
        #[arg(long)]
        protocol: Option<Protocol>,
    },
    /// Write a synthetic eye dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, value_parser = parse_format, default_value = "png")]
        format: ImageFormat,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Parameter totals per sub-module.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        /// Name depth of the breakdown.
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// Multiply-accumulate counts per sub-module for one image.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input side; defaults to the configured input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// Finite-difference gradient checks of every layer and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Compare the base model with each Res_CBAM ablation.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        /// Also train every variant on this manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_format(s: &str) -> Result<ImageFormat, String> {
    match s {
        "png" => Ok(ImageFormat::Png),
        "blob" | "nchw" => Ok(ImageFormat::Blob),
        _ => Err(format!("unknown image format `{s}` (png or blob)")),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Io => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
