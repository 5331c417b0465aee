//! `fundus`: synthesize data, train, generate, evaluate and inspect.

mod commands;
mod env;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use fundus_core::dataset::Split;
use fundus_core::synth::SynthMode;
use fundus_core::training::Regime;

#[derive(Parser, Debug)]
#[command(
    name = "fundus",
    version,
    about = "Keyword-conditioned report generation for retinal images"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic fundus-like dataset with a manifest.
    SynthData(SynthArgs),
    /// Train a report generator or a keyword predictor.
    Train(TrainArgs),
    /// Predict keywords for one image or for every record of a manifest.
    PredictKeywords(PredictArgs),
    /// Generate a report for one image.
    Generate(GenerateArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Export attention traces and heatmap grids for a split.
    Visualize(VisualizeArgs),
    /// Print checkpoint metadata and tensor shapes.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `standard` or `long` (long reports ending in a keyword-driven clause).
    #[arg(long, default_value = "standard", value_parser = parse_mode)]
    pub mode: SynthMode,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file (`key = value` lines). Flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `generator` or `predictor`.
    #[arg(long)]
    pub target: Option<String>,
    /// Keyword predictor run directory, for the predicted regime.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, as `key=value`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["image", "dataset"])))]
pub struct PredictArgs {
    /// Keyword predictor run directory.
    #[arg(long)]
    pub predictor: PathBuf,
    /// Single image; keywords are printed.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Manifest; an overlay with predicted keywords for every record is written.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overlay output file (default: standard output).
    #[arg(long, requires = "dataset")]
    pub out: Option<PathBuf>,
    /// Load even if the stored config hash does not match.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("conditioning").required(true).args(["keywords", "predict", "no_keywords"])))]
pub struct GenerateArgs {
    /// Generator run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Expert keywords, `;`-separated.
    #[arg(long)]
    pub keywords: Option<String>,
    /// Keyword predictor run directory; its predictions condition the report.
    #[arg(long, value_name = "PREDICTOR")]
    pub predict: Option<PathBuf>,
    /// Condition on the empty keyword set.
    #[arg(long)]
    pub no_keywords: bool,
    /// Directory for the attention trace and heatmap grid.
    #[arg(long, value_name = "DIR")]
    pub visualize: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// `expert`, `predicted` or `none`.
    #[arg(long, default_value = "expert", value_parser = parse_regime)]
    pub regime: Regime,
    /// Keyword predictor run directory (required by the predicted regime).
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Manifest to use instead of the one recorded in the run config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory for metrics.txt, predictions.tsv and references.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value = "expert", value_parser = parse_regime)]
    pub regime: Regime,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of samples to export.
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint file, or a run directory.
    pub path: PathBuf,
}

fn parse_mode(s: &str) -> Result<SynthMode, String> {
    s.parse().map_err(|e: fundus_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: fundus_core::Error| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: fundus_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let env = match env::Env::from_process() {
        Ok(e) => e,
        Err(msg) => {
            eprintln!("{} {msg}", env::error_prefix(false));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(&a),
        Command::Train(a) => commands::train(&a, &env),
        Command::PredictKeywords(a) => commands::predict_keywords(&a, &env),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a, &env),
        Command::Visualize(a) => commands::visualize(&a, &env),
        Command::InspectCheckpoint(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{} {e}", env::error_prefix(env.color_stderr));
            ExitCode::from(e.exit_code())
        }
    }
}
