use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nfsense", version, about = "Non-Fourier SENSE reconstruction workflow")]
pub struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random draw
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Memory budget for the phase matrix, e.g. 512M or 2G
    #[arg(long, global = true)]
    pub memory_budget: Option<String>,
    /// TOML file mirroring the flags; flags win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with ground truth
    Simulate(SimulateArgs),
    /// Trusted and reconstruction masks from the prescan
    Masks(MasksArgs),
    /// Coil sensitivity maps
    Sensmaps(SensmapsArgs),
    /// Off-resonance map
    B0map(B0mapArgs),
    /// k-space filter from the trajectory hull
    Kfilter(KfilterArgs),
    /// CG reconstruction
    Recon(ReconArgs),
    /// SSIM and relative RMSE between two images
    Metrics(MetricsArgs),
    /// Corner of the L-curve in a CG log
    Lcurve(LcurveArgs),
    /// masks, sensmaps, b0map, kfilter and recon in order
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// shepp-like, discs or checker
    #[arg(long)]
    pub phantom: Option<String>,
    /// Grid size; the third extent is optional
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub coils: Option<usize>,
    /// Raw-data noise per real component
    #[arg(long)]
    pub noise: Option<f64>,
    /// Field expansion order (1, 2 or 3)
    #[arg(long)]
    pub order: Option<u8>,
    /// spiral or cartesian
    #[arg(long)]
    pub trajectory: Option<String>,
    /// Spiral samples per plane
    #[arg(long)]
    pub samples: Option<usize>,
    /// Cartesian undersampling factor
    #[arg(long)]
    pub undersample: Option<usize>,
    /// zero, ramp or blob
    #[arg(long)]
    pub b0: Option<String>,
    /// Peak off-resonance in rad/s for ramp and blob
    #[arg(long)]
    pub b0_peak: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub opts: MaskFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct MaskFlags {
    /// Degree of the log-domain bias polynomial
    #[arg(long)]
    pub bias_degree: Option<usize>,
    /// Dilation radius of the reconstruction mask, in voxels
    #[arg(long = "dilate")]
    pub dilate: Option<usize>,
    /// Explicit threshold on the bias-corrected magnitude
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SolverFlags {
    /// ic0, jacobi or none
    #[arg(long)]
    pub precond: Option<String>,
    /// Relative residual tolerance
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SensmapsArgs {
    pub dataset: PathBuf,
    /// Smoothness weight
    #[arg(long)]
    pub alpha_s: Option<f64>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct B0mapArgs {
    pub dataset: PathBuf,
    /// Smoothness weight
    #[arg(long)]
    pub alpha_b: Option<f64>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct KfilterArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub opts: KfilterFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct KfilterFlags {
    /// Dilate the filter by this many grid points
    #[arg(long = "dilate")]
    pub dilate: Option<usize>,
    /// Build the filter plane by plane (3D stacks of 2D acquisitions)
    #[arg(long)]
    pub per_slice: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ReconFlags {
    /// CG iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// auto, full, or samples per block
    #[arg(long)]
    pub split_block: Option<String>,
    /// Field expansion order used for the reconstruction
    #[arg(long)]
    pub order: Option<u8>,
    /// CG log CSV (iter, res_norm, sol_norm)
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Timing CSV (phase_label, seconds)
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Data follow the exp(-i k r) convention
    #[arg(long)]
    pub conjugate_trajectory: bool,
    /// Ignore the B0 map
    #[arg(long)]
    pub no_b0: bool,
    /// Skip the k-space filter
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub opts: ReconFlags,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Array file inside a dataset, e.g. ds/rho.c128
    pub test: PathBuf,
    pub reference: PathBuf,
    /// Mask array file, e.g. ds/mask_r.u8
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub ssim: bool,
    #[arg(long)]
    pub rmse: bool,
    #[arg(long, default_value_t = 11)]
    pub window: usize,
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.03)]
    pub k2: f64,
}

#[derive(Debug, Args)]
pub struct LcurveArgs {
    pub log: PathBuf,
    /// Curvature CSV (iter, curvature)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub masks: MaskFlags,
    #[arg(long)]
    pub alpha_s: Option<f64>,
    #[arg(long)]
    pub alpha_b: Option<f64>,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// k-space filter dilation
    #[arg(long)]
    pub filter_dilate: Option<usize>,
    #[arg(long)]
    pub per_slice: bool,
    #[command(flatten)]
    pub recon: ReconFlags,
}
