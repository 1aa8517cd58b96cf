//! `mcm`: data generation, training, evaluation, reconstruction, concept
//! editing and mask-ratio sweeps.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage error, 3 configuration
//! error, 4 I/O or data error, 5 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcm_core::model::{MaskShape, Variant};

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(
    name = "mcm",
    version,
    about = "Masked concept learning with a multi-layer concept map"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic concept-attributed image folder.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Concept metrics and masked reconstruction error of a checkpoint.
    Eval(EvalArgs),
    /// Mask an image and reconstruct it.
    Reconstruct(ReconstructArgs),
    /// Reconstruct an image with some concepts replaced by prototypes.
    Edit(EditArgs),
    /// Train and evaluate at several mask ratios.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// `key=value` configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Any configuration key, e.g. `--param enc_layers=4`.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub params: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Comma-separated synthetic concepts.
    #[arg(long)]
    pub concepts: Option<String>,
    /// Comma-separated probability of each concept.
    #[arg(long)]
    pub probabilities: Option<String>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Folder with `images/` and `attributes.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Comma-separated attribute columns to learn.
    #[arg(long)]
    pub concepts: Option<String>,
    /// Prototype bank file; a seeded synthetic bank when omitted.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse_ratio)]
    pub mask_ratio: Option<f64>,
    #[arg(long, value_parser = parse_mask_shape)]
    pub mask_shape: Option<MaskShape>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Replace inverse-frequency concept weights by their mean.
    #[arg(long)]
    pub uniform_weights: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to the training mask ratio.
    #[arg(long, value_parser = parse_ratio)]
    pub test_mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Defaults to the bank saved next to the checkpoint.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Defaults to the training mask ratio.
    #[arg(long, value_parser = parse_ratio)]
    pub test_mask_ratio: Option<f64>,
    #[arg(long, value_parser = parse_mask_shape, default_value = "random")]
    pub mask_shape: MaskShape,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub recon: ReconstructArgs,
    /// `concept=pos` or `concept=neg`; repeatable.
    #[arg(long = "set", value_name = "CONCEPT=pos|neg")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Comma-separated training mask ratios.
    #[arg(long, default_value = "0,0.5,0.9")]
    pub ratios: String,
    /// Evaluation folder; the training data when omitted.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Defaults to each row's training ratio.
    #[arg(long, value_parser = parse_ratio)]
    pub test_mask_ratio: Option<f64>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&r) {
        Ok(r)
    } else {
        Err(format!("mask ratio {r} outside [0, 1]"))
    }
}

fn parse_mask_shape(s: &str) -> Result<MaskShape, String> {
    MaskShape::parse(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Edit(a) => commands::edit(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
