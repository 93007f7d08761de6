use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "hybrid-ir", version, about = "Inverse rendering of hybrid SDF-grid and eyeball-sphere heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
#[command(next_help_heading = "Global options")]
pub struct Common {
    /// TOML file overlaid on the preset [default: none]
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Named base configuration
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Full)]
    pub preset: PresetArg,

    /// Output directory; relative output paths resolve inside it
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,

    /// Seed for synthesis, ray sampling and gradient checks [default: preset]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for every parallel section [default: available cores]
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// More progress output on stderr (repeatable) [default: 0]
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetArg {
    Full,
    Desk,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Raw,
    Png,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Volume,
    Surface,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic capture of the built-in head
    Synth(SynthArgs),
    /// Fit a model to a capture with the two-stage schedule
    Fit(FitArgs),
    /// Render a fitted model from dataset or file cameras
    Render(RenderArgs),
    /// Extract a textured mesh from a fitted model
    Export(ExportArgs),
    /// Relight aligned performance frames into a target SH environment
    Relight(RelightArgs),
    /// Compare analytic gradients with finite differences on random scenes
    Gradcheck(GradcheckArgs),
    /// Flash color from the mean of a patch on a white-page photo
    CalibrateFlash(CalibrateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Training views [default: preset]
    #[arg(long)]
    pub views: Option<usize>,
    /// Image width [default: preset]
    #[arg(long)]
    pub width: Option<u32>,
    /// Image height [default: preset]
    #[arg(long)]
    pub height: Option<u32>,
    /// Vertical field of view in degrees [default: preset]
    #[arg(long)]
    pub fov: Option<f64>,
    /// Frame storage format
    #[arg(long, value_enum, default_value_t = FormatArg::Raw)]
    pub format: FormatArg,
    /// Also write this many interleaved unseen views (0 or at least 4) to held_out/
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Capture directory
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Capture of unseen views scored after fitting [default: none]
    #[arg(long, value_name = "DIR")]
    pub held_out: Option<PathBuf>,
    /// Total iterations [default: preset]
    #[arg(long)]
    pub total_iters: Option<usize>,
    /// Volume-rendering iterations before the surface stage [default: preset]
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    /// Initial learning rate [default: preset]
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Learning-rate decay factor [default: preset]
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// Iterations between learning-rate decays [default: preset]
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    /// Rays per step [default: preset]
    #[arg(long)]
    pub rays_per_batch: Option<usize>,
    /// Adam first-moment decay [default: preset]
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    /// Adam second-moment decay [default: preset]
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    /// Adam denominator epsilon [default: preset]
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// Volume samples per ray [default: preset]
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    /// Flash calibration written by calibrate-flash [default: white, scale 8]
    #[arg(long, value_name = "FILE")]
    pub flash: Option<PathBuf>,
    /// Write a model snapshot every N steps, 0 for none
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    /// Fitted model directory
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Render every frame of this capture and score against its images [default: none]
    #[arg(long, value_name = "DIR", conflicts_with = "camera")]
    pub data: Option<PathBuf>,
    /// Render one camera stored as JSON [default: none]
    #[arg(long, value_name = "FILE")]
    pub camera: Option<PathBuf>,
    /// Rendering mode
    #[arg(long, value_enum, default_value_t = ModeArg::Surface)]
    pub mode: ModeArg,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Fitted model directory
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Capture whose cameras decide triangle visibility
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Lattice samples per axis [default: preset]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Texture width and height in texels [default: preset]
    #[arg(long)]
    pub texture_size: Option<usize>,
    /// Extraction level of the union SDF [default: preset]
    #[arg(long)]
    pub iso: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct RelightArgs {
    /// Fitted model directory
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Camera of the performance frames, as JSON
    #[arg(long, value_name = "FILE")]
    pub camera: PathBuf,
    /// Target environment: JSON with nine RGB SH weights
    #[arg(long, value_name = "FILE")]
    pub target_env: PathBuf,
    /// Directory of frames aligned with the camera (.raw or .png)
    #[arg(long, value_name = "DIR")]
    pub performance: PathBuf,
    /// Ratio denominator floor in linear units [default: preset]
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Random scenes [default: preset]
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Rays per scene [default: preset]
    #[arg(long)]
    pub rays: Option<usize>,
    /// Grid resolution per axis [default: preset]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Largest acceptable relative error [default: preset]
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Photo of a white page lit by the flash (.raw linear or .png)
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Patch as X,Y,W,H in pixels
    #[arg(long, value_name = "X,Y,W,H", value_parser = parse_patch)]
    pub patch: (u32, u32, u32, u32),
    /// Flash scale stored with the color
    #[arg(long, default_value_t = 8.0)]
    pub scale: f64,
}

fn parse_patch(s: &str) -> Result<(u32, u32, u32, u32), String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok((x, y, w, h)),
        _ => Err(format!("expected X,Y,W,H, got {s:?}")),
    }
}
