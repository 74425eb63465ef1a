//! `morphcons` command-line front end.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Relative `--out` paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "MORPHCONS_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "morphcons",
    version,
    about = "Morphology-consistent segmentation and classification on synthetic lesions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the morphology features of a mask as JSON
    Features(FeaturesArgs),
    /// Generate a synthetic lesion dataset (PGM pairs plus manifest.csv)
    Synth(SynthArgs),
    /// Train one model
    Train(TrainArgs),
    /// Train one model per consistency strength and select the best
    Sweep(SweepArgs),
    /// Evaluate a checkpoint (per-image Dice, AUC)
    Eval(EvalArgs),
    /// Paired Wilcoxon signed-rank test on two per-image CSVs
    Compare(CompareArgs),
    /// Finite-difference check of every analytic gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Mask image (PGM or PNG); pixel k is read as probability k/255
    #[arg(long)]
    pub mask: PathBuf,
    /// Grayscale image for the texture feature
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Checkpoint supplying normalizer statistics and prior weights
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Recorded in the run manifest; feature extraction is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write features.json and a run manifest into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Shifted,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of samples
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    pub domain: DomainArg,
    /// Fraction of benign (ellipse) lesions
    #[arg(long, default_value_t = 0.5)]
    pub benign: f64,
    /// Fraction of malignant (star) lesions
    #[arg(long, default_value_t = 0.4)]
    pub malignant: f64,
    /// Fraction of tumor-free images
    #[arg(long, default_value_t = 0.1)]
    pub no_tumor: f64,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// File name prefix
    #[arg(long, default_value = "s")]
    pub prefix: String,
    #[arg(long, default_value = "runs/synth")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlowArg {
    Both,
    PredictionOnly,
    PriorOnly,
}

/// Training settings. Each flag overrides the same field of `--config`.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON training config; unspecified fields keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Peak learning rate [default: 9.2e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Decoupled weight decay [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Segmentation loss weight [default: 0.9]
    #[arg(long)]
    pub w_seg: Option<f64>,
    /// Classification loss weight [default: 0.1]
    #[arg(long)]
    pub w_cls: Option<f64>,
    /// Consistency strength [default: 0.17]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// No-tumor penalty weight [default: 0.5]
    #[arg(long)]
    pub lambda_nt: Option<f64>,
    /// L2 penalty on the prior logits [default: 0.001]
    #[arg(long)]
    pub beta: Option<f64>,
    /// baseline forces alpha = 0 [default: proposed]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Which side of the consistency term is trained [default: both]
    #[arg(long, value_enum)]
    pub flow: Option<FlowArg>,
    /// Encoder input channels, 1 or 3 [default: 1]
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Training set manifest instead of the synthetic source split
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Validation set manifest instead of the synthetic source split
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seeds initialization and batch order
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated consistency strengths
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
    pub alphas: Vec<f64>,
    /// Runs trained concurrently
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest; defaults to the synthetic test split of the config
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON training config providing the loss weights and test split
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the synthetic test split
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Per-image CSV of the first model
    pub a: PathBuf,
    /// Per-image CSV of the second model
    pub b: PathBuf,
    /// Column holding the paired metric
    #[arg(long, default_value = "dice")]
    pub column: String,
    /// Recorded in the run manifest; the test is deterministic
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write compare.json and a run manifest into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds the random instances and probe selection
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries probed per instance; all entries when omitted
    #[arg(long)]
    pub probes: Option<usize>,
    /// Random instances per target
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    /// Side length of the logit grid
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also write gradcheck.json and a run manifest into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Features(a) => commands::features(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
