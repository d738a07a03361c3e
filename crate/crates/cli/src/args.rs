use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Rotating-PSF localization pipeline: PSF dictionaries, synthetic data,
/// variational reconstruction and scoring.
///
/// Every command writes a `run_manifest.json` next to its outputs; pass it to
/// `--from-manifest` to re-execute the run bit-exactly.
#[derive(Debug, Parser)]
#[command(name = "rpsf", version, propagate_version = true)]
#[command(args_conflicts_with_subcommands = true, subcommand_required = false)]
pub struct Cli {
    /// Worker threads for per-image parallelism (0 = all cores). Results do
    /// not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    /// Re-execute the run recorded in this manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub from_manifest: Option<PathBuf>,

    /// With `--from-manifest`: write into this directory instead of the one
    /// holding the manifest.
    #[arg(long, requires = "from_manifest", value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Render a PSF dictionary.
    Psf(PsfArgs),
    /// Generate a synthetic dataset (scenes, clean and observed images).
    Simulate(SimulateArgs),
    /// Reconstruct every observed image of a dataset.
    Reconstruct(ReconstructArgs),
    /// Ground-truth-aided descent on the composite loss.
    Refine(RefineArgs),
    /// Score reconstructions against their ground truth.
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Psf(_) => "psf",
            Command::Simulate(_) => "simulate",
            Command::Reconstruct(_) => "reconstruct",
            Command::Refine(_) => "refine",
            Command::Evaluate(_) => "evaluate",
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            Command::Psf(a) => &a.out,
            Command::Simulate(a) => &a.out,
            Command::Reconstruct(a) => &a.out,
            Command::Refine(a) => &a.out,
            Command::Evaluate(a) => &a.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Psf(a) => a.out = out,
            Command::Simulate(a) => a.out = out,
            Command::Reconstruct(a) => a.out = out,
            Command::Refine(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PsfArgs {
    /// Number of Fresnel zones L.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(1..))]
    pub zones: u64,
    /// Number of depth planes D, spread uniformly over [-πL, πL].
    #[arg(long, default_value_t = 21, value_parser = clap::value_parser!(u64).range(1..))]
    pub depths: u64,
    /// Image height (and width unless `--width` is given).
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(1..))]
    pub size: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub width: Option<u64>,
    #[arg(long, default_value_t = 256)]
    pub pupil_samples: usize,
    /// Pixel pitch in Rayleigh units.
    #[arg(long, default_value_t = 0.5)]
    pub pixel_pitch: f64,
    /// Also write one max-normalized PNG per slice.
    #[arg(long)]
    pub png: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseArg {
    Gaussian,
    Poisson,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub dictionary: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    /// Fixed number of sources per image.
    #[arg(long, conflicts_with = "density_range")]
    pub density: Option<usize>,
    /// Uniform source count `LO:HI` (default 5:50).
    #[arg(long, value_name = "LO:HI")]
    pub density_range: Option<String>,
    #[arg(long, value_enum, default_value_t = NoiseArg::Poisson)]
    pub noise: NoiseArg,
    /// Background photon level.
    #[arg(long, default_value_t = 5.0)]
    pub b: f64,
    /// Gaussian σ as a fraction of each clean image's maximum (default 0.1).
    #[arg(long, conflicts_with = "sigma")]
    pub sigma_frac: Option<f64>,
    /// Absolute Gaussian σ.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 2000.0)]
    pub flux_mean: f64,
    #[arg(long, default_value_t = 0.0)]
    pub min_separation: f64,
    #[arg(long, default_value_t = 4.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generate the fixed-density test protocol (densities 5, 10, …, 45, one
    /// sub-dataset each) instead of a single dataset.
    #[arg(long, conflicts_with_all = ["density", "density_range", "images"])]
    pub protocol: bool,
    #[arg(long, default_value_t = 10, requires = "protocol")]
    pub images_per_density: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    #[value(name = "l2-cel0")]
    L2Cel0,
    #[value(name = "kl-nc")]
    KlNc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Zeros,
    Adjoint,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Penalty weight μ (default: 120·σ² for ℓ2-CEL0, 50 for KL-NC).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Non-convexity parameter of the KL-NC penalty.
    #[arg(long, default_value_t = 100.0)]
    pub a: f64,
    /// Background (default: from the image metadata).
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Adjoint)]
    pub init: InitArg,
    /// Use this fixed step instead of backtracking.
    #[arg(long)]
    pub fixed_step: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RefineArgs {
    #[arg(long)]
    pub dictionary: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Data-fidelity weight (default 1).
    #[arg(long)]
    pub w1: Option<f64>,
    /// Regularizer weight (default 700 Gaussian, 1 Poisson).
    #[arg(long)]
    pub w2: Option<f64>,
    /// Smoothed-MSE weight (default 1000 Gaussian, 500 Poisson).
    #[arg(long)]
    pub w3: Option<f64>,
    /// CEL0 μ (default 120·σ² per image).
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kernel_sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub kernel_radius: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    #[value(name = "3d")]
    Euclidean3d,
    Transverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepArg {
    None,
    Density,
    NoiseLevel,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Output directories of `reconstruct` or `refine` runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub threshold_frac: f64,
    #[arg(long, default_value_t = 2.0)]
    pub cluster_radius: f64,
    /// True-positive distance in voxels.
    #[arg(long, default_value_t = 2.0)]
    pub match_threshold: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean3d)]
    pub metric: MetricArg,
    /// Grouping of the report; `noise-level` also draws `sweep.png`.
    #[arg(long, value_enum, default_value_t = SweepArg::None)]
    pub sweep: SweepArg,
}
