mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Weakly supervised 3D radio map estimation.
#[derive(Debug, Parser)]
#[command(name = "radiofield3d", version, about)]
#[command(after_help = "Worker threads can be capped with RADIOFIELD3D_THREADS.\nExit codes: 0 success, 1 runtime error, 2 usage or config error.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run a comparison along one axis.
    Ablate(AblateArgs),
    /// Write per-layer heatmaps and height maps of one scene.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<radiofield3d::train::Objective>,
    /// Supervised layer indices, e.g. `0,4,7`.
    #[arg(long, value_delimiter = ',')]
    pub supervised: Option<Vec<usize>>,
    /// Observations per training scene.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: radiofield3d::synth::Split,
    /// Observations per scene.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Layers counted as labeled (defaults to the training layers of the config).
    #[arg(long, value_delimiter = ',')]
    pub supervised: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Altitude,
    Sampling,
    Loss,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Supervised-layer sets for the altitude axis, e.g. `0,4,7;3,4,5`.
    #[arg(long)]
    pub strategies: Option<String>,
    /// Observation counts for the sampling axis, e.g. `5,25,100`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Train one model per count on the sampling axis.
    #[arg(long)]
    pub retrain: bool,
    /// Loss variants, e.g. `lv,lv+lp,full`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene file (`.rm3d`).
    #[arg(long)]
    pub scene: PathBuf,
    /// Also render the prediction of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "render")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub supervised: Option<Vec<usize>>,
}

fn parse_objective(s: &str) -> Result<radiofield3d::train::Objective, String> {
    s.parse().map_err(|e: radiofield3d::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<radiofield3d::synth::Split, String> {
    s.parse().map_err(|e: radiofield3d::Error| e.to_string())
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(radiofield3d::Error),
}

impl From<radiofield3d::Error> for Failure {
    fn from(e: radiofield3d::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
