use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchlab_core::{AttackKind, GridSpec, OracleSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "patchlab", version, about = "Patch mixing, occlusion attacks and contrastive saliency for image classifiers")]
pub struct Cli {
    /// JSON file with flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mix two images with Patch Mixing, Mixup, CutMix or the random policy.
    Mix(MixArgs),
    /// Apply a patch attack to every image in a folder.
    Attack(AttackArgs),
    /// Superimpose occluder sprites at target occlusion fractions.
    Smd(SmdArgs),
    /// Contrastive RISE saliency map for one image.
    Crise(CriseArgs),
    /// Inverse patch selectivity over a labeled folder.
    Selectivity(SelectivityArgs),
    /// Accuracy against information loss over a labeled folder.
    Eval(EvalArgs),
    /// Host a linear probe over the oracle protocol on stdio or TCP.
    Serve(ServeArgs),
    /// Re-run a command from the config.json it wrote.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Mix(_) => "mix",
            Command::Attack(_) => "attack",
            Command::Smd(_) => "smd",
            Command::Crise(_) => "crise",
            Command::Selectivity(_) => "selectivity",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
            Command::Replay(_) => "replay",
        }
    }
}

/// Beta distribution parameters written `A,B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl FromStr for BetaParams {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected A,B with positive numbers, got {s:?}");
        let (a, b) = s.split_once(',').ok_or_else(bad)?;
        let alpha: f64 = a.trim().parse().map_err(|_| bad())?;
        let beta: f64 = b.trim().parse().map_err(|_| bad())?;
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(bad());
        }
        Ok(Self { alpha, beta })
    }
}

impl TryFrom<String> for BetaParams {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<BetaParams> for String {
    fn from(b: BetaParams) -> String {
        b.to_string()
    }
}

impl fmt::Display for BetaParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.alpha, self.beta)
    }
}

fn parse_oracle(s: &str) -> Result<String, String> {
    OracleSpec::from_str(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    PatchMixing,
    Mixup,
    Cutmix,
    /// Draw the method uniformly per the training policy.
    Policy,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MixArgs {
    /// Source image A, kept outside the mixed region.
    pub image_a: PathBuf,
    /// Source image B, pasted into the mixed region.
    pub image_b: PathBuf,
    #[arg(long, value_enum, default_value = "patch-mixing")]
    pub method: MethodArg,
    #[arg(long, default_value = "7x7")]
    pub grid: GridSpec,
    /// Fixed mixing ratio (share of B for patch mixing, of A for mixup and cutmix).
    #[arg(long, conflicts_with = "beta", value_parser = parse_fraction)]
    pub ratio: Option<f64>,
    /// Draw the ratio from Beta(A, B); defaults to 0.3,0.3.
    #[arg(long, value_name = "A,B")]
    pub beta: Option<BetaParams>,
    /// Label smoothing rate.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Category count; with --label-a/--label-b the mixed label is recorded.
    #[arg(long, requires_all = ["label_a", "label_b"])]
    pub k: Option<usize>,
    #[arg(long, requires = "k")]
    pub label_a: Option<usize>,
    #[arg(long, requires = "k")]
    pub label_b: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackArgs {
    #[arg(long, default_value = "mix")]
    pub kind: AttackKind,
    #[arg(long, default_value = "7x7")]
    pub grid: GridSpec,
    /// Fraction of patches replaced or dropped (ignored by permute).
    #[arg(long, default_value_t = 0.3)]
    pub loss: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Donor images for mix; defaults to the input folder.
    #[arg(long)]
    pub donor_dir: Option<PathBuf>,
    /// `image_id,category_index` file; defaults to IN_DIR/labels.csv.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Drop fill: one value or one per channel.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub fill: Vec<f64>,
    /// Center-crop images so the grid divides them.
    #[arg(long)]
    pub center_crop: bool,
    pub in_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SmdArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3", value_parser = parse_fraction)]
    pub targets: Vec<f64>,
    /// Sprite library laid out as CATEGORY/NAME.png (RGBA).
    #[arg(long)]
    pub sprites: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub tol: f64,
    /// Targets at or below this place occluders without overlap.
    #[arg(long, default_value_t = 0.15)]
    pub overlap_threshold: f64,
    /// Smallest sprite size as a fraction of the image's shorter side.
    #[arg(long, default_value_t = 0.15)]
    pub scale_min: f64,
    #[arg(long, default_value_t = 0.35)]
    pub scale_max: f64,
    #[arg(long, default_value_t = 200)]
    pub max_attempts: usize,
    #[arg(long)]
    pub no_rotate: bool,
    pub in_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceArg {
    Probability,
    Logit,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RiseArgs {
    #[arg(long, default_value_t = 14_000)]
    pub n_masks: usize,
    /// Cell size in pixels of the random mask grid.
    #[arg(long, default_value_t = 14)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.5)]
    pub keep_prob: f64,
    /// Masked images per oracle request.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "probability")]
    pub score_space: SpaceArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CriseArgs {
    #[arg(long, value_parser = parse_oracle)]
    pub oracle: String,
    /// Category to explain; defaults to the top-1 prediction.
    #[arg(long)]
    pub category: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub rise: RiseArgs,
    /// Center-crop the image so the stride divides it.
    #[arg(long)]
    pub center_crop: bool,
    /// Store the softmax-normalized map instead of the raw one.
    #[arg(long)]
    pub softmax: bool,
    pub image: PathBuf,
    /// Colorized overlay PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw map as little-endian f32, row-major.
    #[arg(long)]
    pub out_raw: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SelectivityArgs {
    #[arg(long, value_parser = parse_oracle)]
    pub oracle: String,
    #[arg(long, default_value = "7x7")]
    pub grid: GridSpec,
    /// Fraction of patches mixed in from a donor before explaining.
    #[arg(long, default_value_t = 0.3, value_parser = parse_fraction)]
    pub level: f64,
    #[arg(long, default_value_t = 5)]
    pub per_class_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub rise: RiseArgs,
    /// `image_id,category_index` file; defaults to DATASET/labels.csv.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Donor images for patch mixing; defaults to the dataset itself.
    #[arg(long)]
    pub donor_dir: Option<PathBuf>,
    /// Center-crop images so the grid and stride divide them.
    #[arg(long)]
    pub center_crop: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image folder with labels.csv.
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Mix,
    Drop,
    Permute,
    Smd,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Oracle to evaluate; repeat to compare several.
    #[arg(long, value_parser = parse_oracle, required = true)]
    pub oracle: Vec<String>,
    /// Names for the oracles in tables and plots, in --oracle order.
    #[arg(long)]
    pub name: Vec<String>,
    #[arg(long, value_enum, default_value = "mix")]
    pub kind: SweepKind,
    /// Attack grids, comma separated; each permute grid is one level.
    #[arg(long, value_delimiter = ',', default_value = "7x7")]
    pub grid: Vec<GridSpec>,
    /// Information loss levels, or occlusion targets for smd.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8", value_parser = parse_fraction)]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop fill: one value or one per channel.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub fill: Vec<f64>,
    /// `image_id,category_index` file; defaults to DATASET/labels.csv.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Donor images for patch mixing; defaults to the dataset itself.
    #[arg(long)]
    pub donor_dir: Option<PathBuf>,
    /// Sprite library for --kind smd.
    #[arg(long)]
    pub sprites: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Center-crop images so every grid divides them.
    #[arg(long)]
    pub center_crop: bool,
    /// Skip curves.svg.
    #[arg(long)]
    pub no_plot: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image folder with labels.csv.
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// Probe weights file (the format read by builtin:linear:).
    #[arg(long)]
    pub probe: PathBuf,
    /// Listen on HOST:PORT instead of stdio.
    #[arg(long)]
    pub listen: Option<String>,
    /// Answer plain score requests without contrast scores.
    #[arg(long)]
    pub no_contrast: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A config.json written by an earlier run.
    pub config_file: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
