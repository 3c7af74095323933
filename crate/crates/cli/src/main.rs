//! `splatode` command-line driver.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing artifact, 4 numerical
//! failure, 1 anything else.

mod commands;
mod config;
mod layout;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splatode::pipeline::SourceKind;
use splatode::scene::Preset;

use crate::config::CliVariant;

/// Invalid invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "splatode",
    version,
    about = "Forecast dynamic Gaussian-splat scenes beyond their observed window"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (falls back to ODEGS_SEED, then the config file).
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: splatode::Error| e.to_string())
}

fn parse_source(s: &str) -> Result<SourceKind, String> {
    match s {
        "interp" => Ok(SourceKind::Interp),
        "analytic" => Ok(SourceKind::Analytic),
        other => Err(format!("unknown source {other:?} (expected interp or analytic)")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a scene, render its frames and record ground-truth trajectories.
    GenerateScene {
        #[arg(long, value_parser = parse_preset, help = "circular, linear, harmonic or mixed")]
        preset: Option<Preset>,
        #[arg(long)]
        gaussians: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Fraction of frames that are observed.
        #[arg(long)]
        split: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the timestamp-conditioned interpolation model to the observed frames.
    TrainInterp {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a forecaster on trajectories sampled from the observed window.
    TrainForecast {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        interp: PathBuf,
        /// Output directory for the checkpoint, training log and resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<CliVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_source)]
        source: Option<SourceKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict Gaussian states at future times and write a trajectory file.
    Extrapolate {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        interp: PathBuf,
        /// Forecaster checkpoint (not needed for the timestamp baseline).
        #[arg(long)]
        forecaster: Option<PathBuf>,
        /// Comma-separated absolute times; defaults to an even horizon grid.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        variant: Option<CliVariant>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rasterize every timestamp of a trajectory file.
    Render {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Camera index; defaults to the camera of the matching dataset frame, else 0.
        #[arg(long)]
        camera: Option<usize>,
        /// Also write PNG copies next to the PPM frames.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against the held-out frames (PSNR/SSIM CSV plus plot).
    Evaluate {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// `NAME=PATH` where PATH is a trajectory file or an indexed image directory.
        #[arg(long = "pred", required = true)]
        preds: Vec<String>,
        /// Add the freeze-last-frame baseline rows.
        #[arg(long)]
        freeze_baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG plot path; defaults to the CSV path with an .svg extension.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Plot PSNR/SSIM over time from one or more metrics CSV files.
    Plot {
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole desk-scale experiment in memory and write every artifact.
    Experiment {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<CliVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also train the autoregressive variant and write ablation.csv.
        #[arg(long)]
        ablation: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<splatode::Error>() {
        Some(splatode::Error::MissingArtifact(_)) => 3,
        Some(splatode::Error::Invalid(_)) => 2,
        Some(e) if e.is_numerical() => 4,
        Some(splatode::Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
