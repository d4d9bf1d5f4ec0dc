//! Command-line front end. Every command resolves a [`RunConfig`] first and
//! stores it next to (and, where the format allows, inside) its outputs.

mod commands;
pub mod config;

pub use config::{Overrides, Preset, RunConfig};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Result;
use crate::train::StageSelect;

#[derive(Debug, Parser)]
#[command(name = "bilayer", version, about = "Bi-layer neural head avatars")]
pub struct Cli {
    /// TOML file with `seed`, `preset`, `[model]`, `[train]`, `[synth]`, `[eval]`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic talking-head dataset.
    Synth(SynthArgs),
    /// Train the base model, the texture updater, or both.
    Train(TrainArgs),
    /// Create an avatar file from one frame of a video.
    Avatar(AvatarArgs),
    /// Render frames of an avatar for a keypoint sequence.
    Drive(DriveArgs),
    /// Count multiply-accumulates of the per-frame generator.
    Profile(ProfileArgs),
    /// Score checkpoints on a test set.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame side length in pixels.
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long)]
    pub first_identity: Option<usize>,
    #[arg(long)]
    pub fps: Option<f32>,
    /// Do not write segmentation masks.
    #[arg(long)]
    pub no_masks: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: StageArg,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub updater_iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub updater_batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub standing_batches: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Base,
    Updater,
    Both,
}

impl From<StageArg> for StageSelect {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Base => StageSelect::Base,
            StageArg::Updater => StageSelect::Updater,
            StageArg::Both => StageSelect::Both,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AvatarArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the source video.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub video: String,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Updater steps; defaults to the trained unroll length when the
    /// checkpoint includes a trained updater, otherwise 0.
    #[arg(long)]
    pub enhance_steps: Option<usize>,
    /// Store tensors as half precision.
    #[arg(long)]
    pub fp16: bool,
    /// File name inside the output directory.
    #[arg(long, default_value = "avatar.blav")]
    pub name: String,
}

#[derive(Debug, Args, Serialize)]
pub struct DriveArgs {
    #[arg(long)]
    pub avatar: PathBuf,
    /// `keypoints.jsonl` with one record per output frame.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Also write panels of frame, low-frequency layer, high-frequency
    /// layer, mask and warp field.
    #[arg(long)]
    pub layers: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Profile the configuration of a checkpoint.
    #[arg(long, conflicts_with = "avatar")]
    pub checkpoint: Option<PathBuf>,
    /// Profile an avatar by tracing its folded generator.
    #[arg(long)]
    pub avatar: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Test dataset; its identities must not appear in `--fit-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset the identity encoder and landmark detector are fitted on.
    #[arg(long)]
    pub fit_data: PathBuf,
    /// Checkpoints to compare; repeat the flag for several.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn args<T: Serialize>(a: &T) -> serde_json::Value {
    serde_json::to_value(a).expect("arguments serialize")
}

pub fn execute(cli: Cli) -> Result<()> {
    let flags = |preset: Option<Preset>, tree: serde_json::Value| Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        preset,
        tree,
    };
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => {
            let tree = serde_json::json!({ "synth": commands::synth_overrides(a) });
            let run = RunConfig::resolve("synth", file, &flags(None, tree), args(a))?;
            commands::synth(&run)
        }
        Command::Train(a) => {
            let tree = serde_json::json!({ "train": commands::train_overrides(a) });
            let run = RunConfig::resolve("train", file, &flags(a.preset, tree), args(a))?;
            commands::train(&run, a)
        }
        Command::Avatar(a) => {
            let run = RunConfig::resolve("avatar", file, &flags(None, serde_json::json!({})), args(a))?;
            commands::avatar(&run, a)
        }
        Command::Drive(a) => {
            let run = RunConfig::resolve("drive", file, &flags(None, serde_json::json!({})), args(a))?;
            commands::drive(&run, a)
        }
        Command::Profile(a) => {
            let run = RunConfig::resolve("profile", file, &flags(a.preset, serde_json::json!({})), args(a))?;
            commands::profile(&run, a)
        }
        Command::Eval(a) => {
            let tree = match a.stride {
                Some(s) => serde_json::json!({ "eval": { "stride": s } }),
                None => serde_json::json!({}),
            };
            let run = RunConfig::resolve("eval", file, &flags(None, tree), args(a))?;
            commands::eval(&run, a)
        }
    }
}
