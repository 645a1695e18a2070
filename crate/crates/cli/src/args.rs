use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "dehaze",
    version,
    about = "Two-branch dehazing network: training, inference and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, loss log and manifest.
    Train(TrainArgs),
    /// Dehaze one image or every image in a directory.
    Dehaze(DehazeArgs),
    /// Evaluate a checkpoint on a paired dataset.
    Eval(EvalArgs),
    /// Run the branch/pretraining ablation or the fusion-tail study.
    Ablate(AblateArgs),
    /// Write synthetic hazy/clean pairs.
    Synth(SynthArgs),
    /// Report parameter count and median inference time.
    Profile(ProfileArgs),
}

/// `HxW`, e.g. `1200x1600`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl std::str::FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dimension `{v}` in `{s}`"))
        };
        let size = Size {
            height: parse(h)?,
            width: parse(w)?,
        };
        if size.height == 0 || size.width == 0 {
            return Err(format!("dimensions must be positive, got `{s}`"));
        }
        Ok(size)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root holding `hazy/` and `GT/` (or split subdirectories).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `official`, `first20_last5` or `all`.
    #[arg(long)]
    pub split_rule: Option<String>,
    /// File-stem suffix of hazy images (e.g. `_hazy`).
    #[arg(long)]
    pub hazy_suffix: Option<String>,
    /// File-stem suffix of clean images (e.g. `_GT`).
    #[arg(long)]
    pub clean_suffix: Option<String>,
    /// Plain-text id list overriding the split rule.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Named recipe (overfit-sanity, ablation-tiny, ablation-small, nh2021-paper-scale).
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON training config; overrides the preset, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (default `runs/<preset>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Supplementary training pairs (e.g. an earlier challenge's data).
    #[arg(long)]
    pub extra_data: Option<PathBuf>,
    /// Gamma applied to the supplementary pairs only.
    #[arg(long)]
    pub gamma_correct: Option<f64>,
    /// Which images of the supplementary pairs are corrected: hazy, clean or both.
    #[arg(long)]
    pub gamma_target: Option<String>,
    /// Published backbone weights (.pth or .safetensors); enables pretraining.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// VGG-16 weights for the perceptual loss.
    #[arg(long)]
    pub vgg: Option<PathBuf>,
    /// Continue from a checkpoint (its embedded config is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint; omit with `--identity` to score the hazy inputs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the no-op baseline instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub identity: bool,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also time inference at this size (e.g. 1200x1600).
    #[arg(long)]
    pub size: Option<Size>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    Ablation,
    FusionTail,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "ablation")]
    pub study: StudyKind,
    /// tiny, small or paper.
    #[arg(long, default_value = "tiny")]
    pub budget: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
    /// Comma-separated subset of rows (ablation: TL-no-pretrain, TL-pretrain,
    /// CDF, TL+CDF-no-pretrain, full; fusion tail: variant names).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// JSON config overriding the budget's base config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Published backbone weights for the pretrained rows.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Steps of stand-in pretraining when no published weights are given
    /// (default: the budget's step count).
    #[arg(long)]
    pub stand_in_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// constant[:depth], linear-ramp or radial.
    #[arg(long, default_value = "radial")]
    pub mode: String,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.9)]
    pub airlight: f64,
    #[arg(long, default_value = "256x256")]
    pub size: Size,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Haze these clean images instead of generating scenes.
    #[arg(long)]
    pub clean: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchChoice {
    Full,
    Tl,
    Cdf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value = "1200x1600")]
    pub size: Size,
    /// Model to time; default is a randomly initialised network.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub branch: BranchChoice,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
