mod args;
mod config;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use log::info;
use nfsense::diagnostics::{lcurve_corner_of, rmse, ssim, SsimParams};
use nfsense::recon::{default_memory_budget, SplitMode};
use nfsense::simulate::{B0Pattern, PhantomKind, SpiralParams, TrajectoryConfig};
use nfsense::sparse::{PreconditionerKind, SolveSettings};
use nfsense::workflow::{self, MaskOptions, ReconOptions};
use nfsense::{Dataset, Error};

use args::{Cli, Command, MaskFlags, ReconFlags, SolverFlags};
use config::FileConfig;

/// Exit codes per error class.
mod code {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const FORMAT: u8 = 4;
    pub const INVALID: u8 = 5;
    pub const NUMERICAL: u8 = 6;
    pub const MEMORY: u8 = 7;
}

struct Failure {
    stage: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn usage(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            code: code::USAGE,
            message: message.into(),
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::MissingFile(_) => code::IO,
        Error::SizeMismatch { .. }
        | Error::UnknownDtype(_)
        | Error::VersionMismatch { .. }
        | Error::Manifest(_)
        | Error::UnknownArray(_)
        | Error::NonFinite(_)
        | Error::Dimension(_)
        | Error::Csv(_) => code::FORMAT,
        Error::InvalidArgument(_) | Error::UnknownKind { .. } | Error::InvalidBlocks(_) | Error::OracleCap { .. } => {
            code::INVALID
        }
        Error::DegenerateFit(_)
        | Error::UnimodalHistogram
        | Error::EmptyMask(_)
        | Error::SolverBreakdown { .. }
        | Error::DegenerateHull => code::NUMERICAL,
        Error::MemoryBudget { .. } => code::MEMORY,
        #[allow(unreachable_patterns)]
        _ => code::INTERNAL,
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for nfsense::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            code: error_code(&e),
            message: e.to_string(),
        })
    }
}

/// Settings shared by all commands after merging flags and the config file.
struct Context {
    seed: u64,
    budget: u64,
    file: FileConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => config::load(path).map_err(|m| Failure::usage("config", m))?,
        None => FileConfig::default(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(Failure::usage("threads", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage("threads", e.to_string()))?;
    }
    let budget = match cli.memory_budget.as_ref().or(file.memory_budget.as_ref()) {
        Some(s) => config::parse_bytes(s).map_err(|m| Failure::usage("memory-budget", m))?,
        None => default_memory_budget(),
    };
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        budget,
        file,
    };
    match cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Masks(a) => {
            let mut ds = open(&a.dataset, "masks")?;
            masks(&ctx, &mut ds, &a.opts)
        }
        Command::Sensmaps(a) => {
            let mut ds = open(&a.dataset, "sensmaps")?;
            sensmaps(&ctx, &mut ds, a.alpha_s, &a.solver)
        }
        Command::B0map(a) => {
            let mut ds = open(&a.dataset, "b0map")?;
            b0map(&ctx, &mut ds, a.alpha_b, &a.solver)
        }
        Command::Kfilter(a) => {
            let mut ds = open(&a.dataset, "kfilter")?;
            kfilter(&ctx, &mut ds, a.opts.dilate, a.opts.per_slice)
        }
        Command::Recon(a) => {
            let mut ds = open(&a.dataset, "recon")?;
            recon(&ctx, &mut ds, &a.opts, false)
        }
        Command::Metrics(a) => metrics(a),
        Command::Lcurve(a) => lcurve(a),
        Command::Pipeline(a) => {
            let mut ds = open(&a.dataset, "pipeline")?;
            masks(&ctx, &mut ds, &a.masks)?;
            sensmaps(&ctx, &mut ds, a.alpha_s, &a.solver)?;
            b0map(&ctx, &mut ds, a.alpha_b, &a.solver)?;
            kfilter(&ctx, &mut ds, a.filter_dilate, a.per_slice)?;
            recon(&ctx, &mut ds, &a.recon, true)
        }
    }
}

fn open(path: &Path, stage: &'static str) -> Result<Dataset, Failure> {
    Dataset::open(path).stage(stage)
}

fn simulate(ctx: &Context, a: args::SimulateArgs) -> Result<(), Failure> {
    const STAGE: &str = "simulate";
    let mut cfg = ctx.file.simulate.clone().unwrap_or_default();
    if let Some(p) = &a.phantom {
        cfg.phantom = p.parse::<PhantomKind>().stage(STAGE)?;
    }
    if let Some(d) = &a.dims {
        if !(2..=3).contains(&d.len()) {
            return Err(Failure::usage(STAGE, "--dims takes two or three comma-separated extents"));
        }
        let nz = d.get(2).copied().unwrap_or(1);
        let pitch = cfg.fov_m[0] / cfg.dims[0] as f64;
        cfg.dims = [d[0], d[1], nz];
        cfg.fov_m = [pitch * d[0] as f64, pitch * d[1] as f64, pitch * nz as f64];
    }
    if let Some(c) = a.coils {
        cfg.coils = c;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(o) = a.order {
        cfg.order = o;
    }
    match a.trajectory.as_deref() {
        None => {}
        Some("spiral") => {
            if !matches!(cfg.trajectory, TrajectoryConfig::Spiral(_)) {
                cfg.trajectory = TrajectoryConfig::Spiral(SpiralParams::default());
            }
        }
        Some("cartesian") => {
            if !matches!(cfg.trajectory, TrajectoryConfig::Cartesian { .. }) {
                cfg.trajectory = TrajectoryConfig::Cartesian {
                    undersample: 1,
                    axis: 1,
                    dwell_s: 4e-6,
                };
            }
        }
        Some(other) => {
            return Err(Failure::usage(
                STAGE,
                format!("unknown trajectory `{other}`; expected one of: spiral, cartesian"),
            ))
        }
    }
    match (&mut cfg.trajectory, a.samples, a.undersample) {
        (TrajectoryConfig::Spiral(p), Some(k), _) => p.samples = k,
        (TrajectoryConfig::Cartesian { undersample, .. }, _, Some(r)) => *undersample = r,
        (TrajectoryConfig::Spiral(_), _, Some(_)) => {
            return Err(Failure::usage(STAGE, "--undersample applies to cartesian trajectories"))
        }
        (TrajectoryConfig::Cartesian { .. }, Some(_), _) => {
            return Err(Failure::usage(STAGE, "--samples applies to spiral trajectories"))
        }
        _ => {}
    }
    let peak = a.b0_peak.unwrap_or(200.0);
    match a.b0.as_deref() {
        None => {}
        Some("zero") => cfg.b0 = B0Pattern::Zero,
        Some("ramp") => cfg.b0 = B0Pattern::LinearRamp { peak_rad_s: peak },
        Some("blob") => cfg.b0 = B0Pattern::Blob { peak_rad_s: peak, width: 0.3 },
        Some(other) => {
            return Err(Failure::usage(
                STAGE,
                format!("unknown B0 pattern `{other}`; expected one of: zero, ramp, blob"),
            ))
        }
    }
    let ds = workflow::simulate_dataset(&a.out, &cfg, ctx.seed).stage(STAGE)?;
    println!(
        "wrote {} ({} samples, {} coils, grid {:?})",
        ds.dir().display(),
        ds.manifest.samples,
        ds.manifest.coils,
        ds.manifest.grid.dims
    );
    Ok(())
}

fn masks(ctx: &Context, ds: &mut Dataset, f: &MaskFlags) -> Result<(), Failure> {
    let c = &ctx.file.masks;
    let defaults = MaskOptions::default();
    let opts = MaskOptions {
        bias_degree: f.bias_degree.or(c.bias_degree).unwrap_or(defaults.bias_degree),
        dilate: f.dilate.or(c.dilate).unwrap_or(defaults.dilate),
        threshold: f.threshold.or(c.threshold),
    };
    let r = workflow::run_masks(ds, &opts).stage("masks")?;
    println!(
        "masks: threshold {:.6e}, {} trusted voxels, {} reconstruction voxels",
        r.threshold, r.trusted, r.recon
    );
    Ok(())
}

fn solver_settings(
    stage: &'static str,
    f: &SolverFlags,
    precond: Option<&String>,
    tol: Option<f64>,
) -> Result<SolveSettings, Failure> {
    let mut s = SolveSettings::default();
    if let Some(p) = f.precond.as_ref().or(precond) {
        s.precond = p.parse::<PreconditionerKind>().stage(stage)?;
    }
    if let Some(t) = f.tol.or(tol) {
        s.tol = t;
    }
    Ok(s)
}

fn sensmaps(ctx: &Context, ds: &mut Dataset, alpha: Option<f64>, f: &SolverFlags) -> Result<(), Failure> {
    let c = &ctx.file.sensmaps;
    let settings = solver_settings("sensmaps", f, c.precond.as_ref(), c.tol)?;
    workflow::run_sensmaps(ds, alpha.or(c.alpha_s), settings).stage("sensmaps")?;
    println!("sensmaps: wrote sens");
    Ok(())
}

fn b0map(ctx: &Context, ds: &mut Dataset, alpha: Option<f64>, f: &SolverFlags) -> Result<(), Failure> {
    let c = &ctx.file.b0map;
    let settings = solver_settings("b0map", f, c.precond.as_ref(), c.tol)?;
    workflow::run_b0map(ds, alpha.or(c.alpha_b), settings).stage("b0map")?;
    println!("b0map: wrote b0, b0_stderr, b0_beta");
    Ok(())
}

fn kfilter(ctx: &Context, ds: &mut Dataset, dilate: Option<usize>, per_slice: bool) -> Result<(), Failure> {
    let c = &ctx.file.kfilter;
    let filter = workflow::run_kfilter(
        ds,
        dilate.or(c.dilate).unwrap_or(0),
        per_slice || c.per_slice.unwrap_or(false),
    )
    .stage("kfilter")?;
    let inside = filter.mask.iter().filter(|&&v| v > 0.0).count();
    println!("kfilter: {inside} of {} grid points inside", filter.mask.len());
    Ok(())
}

fn recon(ctx: &Context, ds: &mut Dataset, f: &ReconFlags, default_logs: bool) -> Result<(), Failure> {
    const STAGE: &str = "recon";
    let c = &ctx.file.recon;
    let iterations = f
        .iters
        .or(c.iters)
        .ok_or_else(|| Failure::usage(STAGE, "the number of CG iterations is required (--iters)"))?;
    let split = match f.split_block.as_ref().or(c.split_block.as_ref()) {
        Some(s) => s.parse::<SplitMode>().stage(STAGE)?,
        None => SplitMode::Auto,
    };
    let mut opts = ReconOptions::new(iterations, ctx.budget);
    opts.split = split;
    opts.order = f.order.or(c.order);
    opts.conjugate = f.conjugate_trajectory || c.conjugate_trajectory.unwrap_or(false);
    opts.use_b0 = !f.no_b0;
    opts.use_filter = !f.no_filter;
    let (image, log) = workflow::run_recon(ds, &opts).stage(STAGE)?;
    let log_path = f
        .log
        .clone()
        .or_else(|| default_logs.then(|| ds.dir().join("cg_log.csv")));
    let timing_path = f
        .timing
        .clone()
        .or_else(|| default_logs.then(|| ds.dir().join("timing.csv")));
    if let Some(p) = log_path {
        workflow::write_cg_log(&p, &log).stage(STAGE)?;
        info!("CG log written to {}", p.display());
    }
    if let Some(p) = timing_path {
        workflow::write_timing(&p, &log).stage(STAGE)?;
        info!("timing written to {}", p.display());
    }
    println!(
        "recon: {} iterations, residual {:.6e}, solution norm {:.6e}",
        image.iterations, image.final_residual_norm, image.final_solution_norm
    );
    Ok(())
}

fn metrics(a: args::MetricsArgs) -> Result<(), Failure> {
    const STAGE: &str = "metrics";
    let (grid, test) = workflow::load_array_file(&a.test).stage(STAGE)?;
    let (ref_grid, reference) = workflow::load_array_file(&a.reference).stage(STAGE)?;
    if grid.dims != ref_grid.dims {
        return Err(Failure {
            stage: STAGE,
            code: code::FORMAT,
            message: format!("grids differ: {:?} vs {:?}", grid.dims, ref_grid.dims),
        });
    }
    let mask: Option<Vec<bool>> = match &a.mask {
        Some(p) => {
            let (mg, m) = workflow::load_array_file(p).stage(STAGE)?;
            if mg.dims != grid.dims {
                return Err(Failure {
                    stage: STAGE,
                    code: code::FORMAT,
                    message: "mask grid differs from the images".into(),
                });
            }
            Some(m.iter().map(|v| v.re != 0.0).collect())
        }
        None => None,
    };
    let both = !a.ssim && !a.rmse;
    if a.ssim || both {
        let params = SsimParams {
            window: a.window,
            sigma: a.sigma,
            k1: a.k1,
            k2: a.k2,
            data_range: None,
        };
        let t: Vec<f64> = test.iter().map(|v| v.norm()).collect();
        let r: Vec<f64> = reference.iter().map(|v| v.norm()).collect();
        let s = ssim(&t, &r, &grid, mask.as_deref(), &params).stage(STAGE)?;
        println!("ssim {:.12}", s.mean);
    }
    if a.rmse || both {
        let e = rmse(&test, &reference, mask.as_deref()).stage(STAGE)?;
        println!("rmse {e:.12e}");
    }
    Ok(())
}

fn lcurve(a: args::LcurveArgs) -> Result<(), Failure> {
    const STAGE: &str = "lcurve";
    let log = workflow::read_cg_log(&a.log).stage(STAGE)?;
    let corner = lcurve_corner_of(&log).stage(STAGE)?;
    if let Some(p) = &a.out {
        workflow::write_curvature(p, &corner.curvature).stage(STAGE)?;
    }
    println!(
        "corner iteration {}{}",
        corner.iteration,
        if corner.low_confidence { " (low confidence)" } else { "" }
    );
    Ok(())
}
