//! `rcn`: synthetic data, training, evaluation, ablations and gradient
//! checks for SumNet and RCN keypoint localizers.

mod commands;
mod manifest;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "rcn", version, about = "Coarse-to-fine keypoint localization")]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` settings file (or a previous run's manifest).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic face dataset.
    Synth(SynthArgs),
    /// Train a SumNet or RCN keypoint network.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally jointly with a denoiser.
    Eval(EvalArgs),
    /// Train one network per branch mask and tabulate the errors.
    Ablate(AblateArgs),
    /// Finite-difference checks of every primitive and of whole networks.
    Gradcheck(GradcheckArgs),
    /// Train a keypoint denoiser on a dataset's keypoints.
    DenoiseTrain(DenoiseArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_parser = ["5", "68"])]
    pub keypoints: Option<String>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of distractor ellipses per image.
    #[arg(long)]
    pub clutter: Option<usize>,
    /// Maximum head roll in degrees.
    #[arg(long)]
    pub max_roll: Option<f64>,
    /// Maximum head offset as a fraction of the image side.
    #[arg(long)]
    pub max_shift: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_parser = ["rcn", "sumnet"])]
    pub arch: Option<String>,
    #[arg(long)]
    pub branches: Option<usize>,
    /// Channels in every branch.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Add skip connections across each recombination.
    #[arg(long)]
    pub skip: bool,
    /// `tile` or `bilinear`.
    #[arg(long)]
    pub upsample: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Augment with one random black rectangle per image.
    #[arg(long)]
    pub occlude: bool,
    #[arg(long)]
    pub occlude_min: Option<usize>,
    #[arg(long)]
    pub occlude_max: Option<usize>,
    /// Augment with random similarity transforms.
    #[arg(long)]
    pub jitter: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Weight decay.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Rescale gradients whose global norm exceeds this value.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Stop once validation error reaches this value.
    #[arg(long)]
    pub target: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Branch mask, coarsest first, e.g. "1,0,0,1".
    #[arg(long)]
    pub mask: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Denoiser checkpoint used by `--joint`.
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    /// Also report the joint network + denoiser error.
    #[arg(long)]
    pub joint: bool,
    /// `all`, `train` or `val` (the split `train` used for the same seed).
    #[arg(long, value_parser = ["all", "train", "val"])]
    pub split: Option<String>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Write per-keypoint PGM heatmaps and PPM overlays.
    #[arg(long)]
    pub dump_heatmaps: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Masks separated by `;`, e.g. "1,0,0,0;0,0,0,1;1,1,1,1".
    #[arg(long)]
    pub mask: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated primitive names; all when omitted.
    #[arg(long)]
    pub ops: Option<String>,
    /// Skip the whole-network checks.
    #[arg(long)]
    pub no_network: bool,
    /// Flip analytic gradients to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Keypoints corrupted per training example.
    #[arg(long)]
    pub corrupt: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rcn::Error>() {
        Some(rcn::Error::Numerical(_) | rcn::Error::GradCheck(_)) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
