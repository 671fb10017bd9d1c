//! `gloam`: batch odometry, evaluation, training and inspection.
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, unreadable or malformed inputs: exit 2.
    Input(anyhow::Error),
    /// The pipeline itself failed or an output could not be written: exit 1.
    Runtime(anyhow::Error),
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn input(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "gloam", version, about = "Feature-augmented GICP LiDAR odometry")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "GLOAM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run scan-to-scan odometry over a directory of KITTI `.bin` scans.
    Odom(OdomArgs),
    /// Relative trajectory error of an estimate against ground truth.
    Eval(EvalArgs),
    /// Closed-loop TPE training of both networks.
    Train(TrainArgs),
    /// Write per-scan descriptor files and a PCA model.
    Features(FeaturesArgs),
    /// Write one preprocessed scan with per-point covariances as PLY.
    Export(ExportArgs),
    /// Render a synthetic world into scans and ground-truth poses.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assoc {
    Euclidean,
    Feature,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cov {
    Plane,
    Learned,
}

#[derive(Args, Debug, Clone)]
pub struct ModeArgs {
    /// Association space (overrides the config).
    #[arg(long, value_enum)]
    pub assoc: Option<Assoc>,
    /// Covariance regularization (overrides the config).
    #[arg(long, value_enum)]
    pub cov: Option<Cov>,
    /// Conversion and eigenvalue network weight files.
    #[arg(long, num_args = 2, value_names = ["CONVERSION", "EIGENVALUE"])]
    pub weights: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
pub struct OdomArgs {
    #[arg(long)]
    pub scans: PathBuf,
    #[command(flatten)]
    pub mode: ModeArgs,
    /// Directory of `.glf` descriptor files, one per scan, same stem.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Fixed PCA model instead of fitting one on the sequence.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    /// Estimated poses, KITTI format.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-frame JSON-lines diagnostics (default: `<out>.diag.jsonl`).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
    /// KITTI calibration; the estimate is moved from the velodyne into the camera frame.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Per-length CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML dataset manifest with `[[sequence]]` entries.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Trial journal; an existing journal is resumed.
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long)]
    pub out_weights: PathBuf,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub scans: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// One KITTI `.bin` scan.
    #[arg(long)]
    pub scan: PathBuf,
    #[command(flatten)]
    pub mode: ModeArgs,
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum World {
    Corridor,
    Street,
    Blocks,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "corridor")]
    pub world: World,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    /// Meters travelled per frame.
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Gaussian range noise, meters.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Output directory: `velodyne/*.bin` and `poses.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
