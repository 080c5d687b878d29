//! Dataset-level stages: each reads its inputs from a dataset directory and
//! writes its outputs back, so stages can run separately or in sequence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use num_complex::Complex64;

use crate::b0map::{default_alpha_b, estimate_field_map, smooth_b0};
use crate::data::{mask_indices, Dataset, DatasetManifest, KSpaceFilter, ReconImage, TemporalBasis};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kfilter::{build_filter, build_filter_per_slice, dilate_filter};
use crate::masks::{compute_masks, default_rough_mask, estimate_bias_field, rss_combine, trusted_threshold};
use crate::recon::{build_bases, choose_variant, conjugate_phase, harmonic_count, reconstruct, CGLog, EncodingInputs, SplitMode};
use crate::sensmaps::{compute_sensitivity_maps, default_alpha_s, intensity_correction};
use crate::simulate::{simulate, SimulatedData, SimulationConfig};
use crate::sparse::SolveSettings;

/// Version tag written in the first line of every CSV file.
pub const CSV_VERSION: u32 = 1;

/// Writes a simulated acquisition, ground truth included, as a dataset.
pub fn write_simulation(dir: impl AsRef<Path>, sim: &SimulatedData, config: &SimulationConfig) -> Result<Dataset> {
    let mut manifest = DatasetManifest::new(
        sim.grid,
        sim.sigma.n_samples(),
        sim.sigma.n_coils(),
        sim.temporal.n_terms(),
        sim.prescan.te_s.clone(),
    );
    manifest.harmonic_order = config.order;
    manifest.constant_term = config.constant_term;
    let mut ds = Dataset::create(dir, manifest)?;
    ds.save_raw_coil_data(&sim.sigma)?;
    ds.save_temporal_basis(&sim.temporal)?;
    ds.save_prescan(&sim.prescan)?;
    ds.save_grid_complex("phantom", &sim.phantom.image)?;
    ds.save_mask("mask_true", &sim.phantom.support)?;
    ds.save_grid_real("b0_true", &sim.b0)?;
    ds.save_grid_real("bias", &sim.bias)?;
    ds.save_sensitivity_maps("sens_true", &sim.sens)?;
    Ok(ds)
}

/// Simulates with `seed` and writes the dataset to `dir`.
pub fn simulate_dataset(dir: impl AsRef<Path>, config: &SimulationConfig, seed: u64) -> Result<Dataset> {
    let sim = simulate(config, seed)?;
    write_simulation(dir, &sim, config)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskOptions {
    pub bias_degree: usize,
    pub dilate: usize,
    /// explicit threshold on the bias-corrected magnitude
    pub threshold: Option<f64>,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            bias_degree: 3,
            dilate: 2,
            threshold: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskReport {
    pub threshold: f64,
    pub trusted: usize,
    pub recon: usize,
}

/// First-echo RSS magnitude, bias correction, threshold and morphology.
/// Writes `mask_t`, `mask_r` and the estimated bias field `bias_est`.
pub fn run_masks(ds: &mut Dataset, opts: &MaskOptions) -> Result<MaskReport> {
    let prescan = ds.prescan()?;
    let grid = ds.grid();
    let mag = rss_combine(&prescan, 0)?;
    let bias = estimate_bias_field(&mag, &default_rough_mask(&mag), &grid, opts.bias_degree)?;
    let corrected = bias.correct(&mag);
    let threshold = match opts.threshold {
        Some(t) => t,
        None => trusted_threshold(&corrected)?,
    };
    let masks = compute_masks(&corrected, &grid, threshold, opts.dilate)?;
    ds.save_mask("mask_t", &masks.trusted)?;
    ds.save_mask("mask_r", &masks.recon)?;
    ds.save_grid_real("bias_est", &bias.values)?;
    let report = MaskReport {
        threshold,
        trusted: masks.trusted.iter().filter(|&&m| m).count(),
        recon: masks.recon.iter().filter(|&&m| m).count(),
    };
    info!(
        "threshold {:.4e}: {} trusted voxels, {} reconstruction voxels",
        report.threshold, report.trusted, report.recon
    );
    Ok(report)
}

/// Coil sensitivities from the prescan; writes `sens`.
pub fn run_sensmaps(ds: &mut Dataset, alpha_s: Option<f64>, settings: SolveSettings) -> Result<()> {
    let prescan = ds.prescan()?;
    let masks = ds.masks()?;
    let alpha = alpha_s.unwrap_or_else(|| default_alpha_s(&ds.grid()));
    info!("sensitivity smoothing with alpha_s = {alpha:.3e}");
    let maps = compute_sensitivity_maps(&prescan, &masks, alpha, settings)?;
    ds.save_sensitivity_maps("sens", &maps)
}

/// Field map fit and edge-preserving smoothing; writes `b0`, `b0_stderr`
/// and `b0_beta`.
pub fn run_b0map(ds: &mut Dataset, alpha_b: Option<f64>, settings: SolveSettings) -> Result<()> {
    let prescan = ds.prescan()?;
    let maps = ds.sensitivity_maps("sens")?;
    let grid = ds.grid();
    let field = estimate_field_map(&prescan, &maps)?;
    let alpha = alpha_b.unwrap_or_else(|| default_alpha_b(&grid, &field.stderr));
    info!("B0 smoothing with alpha_b = {alpha:.3e}");
    let b0 = smooth_b0(&field, &grid, alpha, settings)?;
    ds.save_grid_real("b0", &b0)?;
    ds.save_grid_real("b0_stderr", &field.stderr)?;
    ds.save_grid_real("b0_beta", &field.beta)
}

/// Sample coordinates from the linear field terms, skipping a leading
/// global term when present.
pub fn linear_coordinates(temporal: &TemporalBasis, d: usize, constant: bool) -> Result<Vec<Vec<f64>>> {
    let first = 1 + constant as usize;
    if temporal.matrix.ncols() < first + d {
        return Err(Error::Dimension(format!(
            "trajectory has {} field terms, need {d} linear terms",
            temporal.n_terms()
        )));
    }
    Ok((0..temporal.n_samples())
        .map(|k| (first..first + d).map(|c| temporal.matrix[(k, c)]).collect())
        .collect())
}

/// Hull filter of the sampled k-space; writes `kfilter`.
pub fn run_kfilter(ds: &mut Dataset, dilate: usize, per_slice: bool) -> Result<KSpaceFilter> {
    let grid = ds.grid();
    let temporal = ds.temporal_basis()?;
    let d = grid.spatial_dims();
    let coords = linear_coordinates(&temporal, d, ds.manifest.constant_term)?;
    let mut filter = if per_slice && d == 3 {
        build_filter_per_slice(&coords, &grid)?
    } else {
        build_filter(&coords, &grid)?
    };
    if dilate > 0 {
        filter = dilate_filter(&filter, &grid, dilate);
    }
    let inside = filter.mask.iter().filter(|&&f| f > 0.0).count();
    info!("k-space filter keeps {inside} of {} grid points", grid.len());
    ds.save_grid_real("kfilter", &filter.mask)?;
    Ok(filter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconOptions {
    pub iterations: usize,
    pub split: SplitMode,
    /// truncate the field expansion to this order; `None` keeps the dataset's
    pub order: Option<u8>,
    pub budget: u64,
    /// data acquired with the `exp(-i k·r)` convention
    pub conjugate: bool,
    /// `false` reconstructs with the B0 row zeroed
    pub use_b0: bool,
    /// `false` skips the k-space filter even when one is stored
    pub use_filter: bool,
}

impl ReconOptions {
    pub fn new(iterations: usize, budget: u64) -> Self {
        Self {
            iterations,
            split: SplitMode::Auto,
            order: None,
            budget,
            conjugate: false,
            use_b0: true,
            use_filter: true,
        }
    }
}

/// Keeps the time column and the field terms up to `order`.
pub fn truncate_order(
    temporal: &TemporalBasis,
    stored: u8,
    order: u8,
    spatial_dims: usize,
    constant: bool,
) -> Result<TemporalBasis> {
    if order > stored {
        return Err(Error::InvalidArgument(format!(
            "dataset carries field terms up to order {stored}, cannot reconstruct with order {order}"
        )));
    }
    let keep = harmonic_count(order, spatial_dims, constant)? + 1;
    if keep > temporal.matrix.ncols() {
        return Err(Error::Dimension(format!(
            "order {order} needs {keep} temporal columns, trajectory has {}",
            temporal.matrix.ncols()
        )));
    }
    TemporalBasis::new(temporal.matrix.columns(0, keep).into_owned())
}

/// Assembles reconstruction inputs from a processed dataset. A missing B0
/// map counts as zero and a missing filter as all ones.
pub fn encoding_inputs(ds: &Dataset, opts: &ReconOptions) -> Result<EncodingInputs> {
    let grid = ds.grid();
    let m = &ds.manifest;
    let sigma = ds.raw_coil_data()?;
    let stored = ds.temporal_basis()?;
    let order = opts.order.unwrap_or(m.harmonic_order);
    let temporal = truncate_order(&stored, m.harmonic_order, order, grid.spatial_dims(), m.constant_term)?;
    let masks = ds.masks()?;
    let voxels = mask_indices(&masks.recon);
    let maps = ds.sensitivity_maps("sens")?;
    let b0 = if opts.use_b0 && ds.has("b0") {
        ds.read_real("b0")?
    } else {
        if opts.use_b0 {
            warn!("no B0 map in the dataset; reconstructing without off-resonance");
        }
        vec![0.0; grid.len()]
    };
    let j = intensity_correction(&maps, &masks.recon);
    let mut spatial = build_bases(&b0, &voxels, &grid, &temporal, order, m.constant_term)?;
    if opts.conjugate {
        spatial = conjugate_phase(&spatial);
    }
    let filter = if opts.use_filter && ds.has("kfilter") {
        KSpaceFilter::new(ds.read_real("kfilter")?)?
    } else {
        KSpaceFilter::ones(grid.len())
    };
    Ok(EncodingInputs {
        sigma,
        spatial,
        temporal,
        sens: maps.restrict(&voxels),
        intensity: voxels.iter().map(|&l| j[l]).collect(),
        filter,
        grid,
        voxels,
        iterations: opts.iterations,
        element_order: m.element_order,
    })
}

/// Reconstruction stage; writes `rho`.
pub fn run_recon(ds: &mut Dataset, opts: &ReconOptions) -> Result<(ReconImage, CGLog)> {
    let inputs = encoding_inputs(ds, opts)?;
    let variant = choose_variant(&inputs, opts.split, opts.budget)?;
    info!(
        "reconstructing {} voxels from {} samples x {} coils ({:?})",
        inputs.voxels.len(),
        inputs.sigma.n_samples(),
        inputs.sigma.n_coils(),
        match &variant {
            crate::recon::Variant::Full => "full".to_string(),
            crate::recon::Variant::Split { starts } => format!("{} blocks", starts.len() - 1),
        }
    );
    let (image, log) = reconstruct(&inputs, variant, &mut |_, _| {})?;
    ds.save_grid_complex("rho", &image.values)?;
    Ok((image, log))
}

/// Stage names in pipeline order.
pub const PIPELINE_STAGES: [&str; 5] = ["masks", "sensmaps", "b0map", "kfilter", "recon"];

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path, kind: &str) -> Result<csv::Writer<fs::File>> {
    let mut file = create_file(path)?;
    writeln!(file, "# nfsense {kind} v{CSV_VERSION}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `iter,res_norm,sol_norm` with 1-based iterations.
pub fn write_cg_log(path: impl AsRef<Path>, log: &CGLog) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path, "cg-log")?;
    w.write_record(["iter", "res_norm", "sol_norm"])?;
    for (i, (r, s)) in log.residual_norms.iter().zip(&log.solution_norms).enumerate() {
        w.write_record([(i + 1).to_string(), format!("{r:e}"), format!("{s:e}")])?;
    }
    flush(w, path)
}

/// `phase_label,seconds`, in execution order.
pub fn write_timing(path: impl AsRef<Path>, log: &CGLog) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path, "timing")?;
    w.write_record(["phase_label", "seconds"])?;
    for t in &log.timings {
        w.write_record([t.label.clone(), format!("{:e}", t.seconds)])?;
    }
    flush(w, path)
}

/// Reads a file written by [`write_cg_log`].
pub fn read_cg_log(path: impl AsRef<Path>) -> Result<CGLog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut log = CGLog::default();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("malformed row in {}", path.display())))
        };
        log.residual_norms.push(field(1)?);
        log.solution_norms.push(field(2)?);
    }
    Ok(log)
}

/// `iter,curvature`.
pub fn write_curvature(path: impl AsRef<Path>, curvature: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path, "lcurve")?;
    w.write_record(["iter", "curvature"])?;
    for (i, k) in curvature.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{k:e}")])?;
    }
    flush(w, path)
}

/// Loads one array file of a dataset by path, e.g. `ds/rho.c128`. Real
/// arrays are returned with zero imaginary part.
pub fn load_array_file(path: impl AsRef<Path>) -> Result<(Grid, Vec<Complex64>)> {
    let path = path.as_ref();
    let dir: PathBuf = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let ds = Dataset::open(&dir)?;
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::MissingFile(path.to_path_buf()))?;
    let name = ds
        .manifest
        .arrays
        .iter()
        .find(|(_, e)| e.file == file)
        .map(|(n, _)| n.clone())
        .ok_or_else(|| Error::UnknownArray(file.to_string()))?;
    let entry = &ds.manifest.arrays[&name];
    let values = match entry.dtype.as_str() {
        "c128" | "c64" => ds.read_complex(&name)?,
        "u8" => ds
            .read_mask(&name)?
            .into_iter()
            .map(|m| Complex64::new(m as u8 as f64, 0.0))
            .collect(),
        _ => ds.read_real(&name)?.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
    };
    if values.len() != ds.grid().len() {
        return Err(Error::Dimension(format!("`{name}` is not a grid array")));
    }
    Ok((ds.grid(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{SpiralParams, TrajectoryConfig};
    use nalgebra::DMatrix;

    fn small_config() -> SimulationConfig {
        SimulationConfig {
            dims: [16, 16, 1],
            fov_m: [0.2, 0.2, 0.2 / 16.0],
            coils: 2,
            trajectory: TrajectoryConfig::Spiral(SpiralParams {
                samples: 600,
                turns: 8.0,
                readout_s: 5e-3,
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_runs_on_simulated_data() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = simulate_dataset(dir.path(), &small_config(), 1).unwrap();
        let report = run_masks(&mut ds, &MaskOptions::default()).unwrap();
        assert!(report.trusted > 0 && report.recon >= report.trusted);
        run_sensmaps(&mut ds, None, SolveSettings::default()).unwrap();
        run_b0map(&mut ds, None, SolveSettings::default()).unwrap();
        run_kfilter(&mut ds, 0, false).unwrap();
        let (image, log) = run_recon(&mut ds, &ReconOptions::new(5, 1 << 30)).unwrap();
        assert_eq!(log.iterations(), 5);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.read_complex("rho").unwrap(), image.values);
    }

    #[test]
    fn estimated_maps_reproduce_phantom_contrast() {
        let dir = tempfile::tempdir().unwrap();
        let config = SimulationConfig {
            trajectory: TrajectoryConfig::Spiral(SpiralParams {
                samples: 3000,
                ..SpiralParams::default()
            }),
            ..SimulationConfig::default()
        };
        let mut ds = simulate_dataset(dir.path(), &config, 5).unwrap();
        run_masks(&mut ds, &MaskOptions::default()).unwrap();
        run_sensmaps(&mut ds, None, SolveSettings::default()).unwrap();
        run_b0map(&mut ds, None, SolveSettings::default()).unwrap();
        let mut opts = ReconOptions::new(20, u64::MAX);
        opts.use_filter = false;
        let (image, _) = run_recon(&mut ds, &opts).unwrap();
        let phantom = ds.read_complex("phantom").unwrap();
        let mask = ds.masks().unwrap().recon;
        let (mut num, mut den) = (0.0, 0.0);
        for l in (0..mask.len()).filter(|&l| mask[l]) {
            num += (image.values[l].norm() - phantom[l].norm()).powi(2);
            den += phantom[l].norm_sqr();
        }
        assert!((num / den).sqrt() < 0.3, "magnitude error {}", (num / den).sqrt());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = CGLog {
            residual_norms: vec![1.0, 0.5, 0.125],
            solution_norms: vec![0.3, 0.7, 0.9],
            ..Default::default()
        };
        let path = dir.path().join("log.csv");
        write_cg_log(&path, &log).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# nfsense cg-log v1\niter,res_norm,sol_norm\n1,"));
        let back = read_cg_log(&path).unwrap();
        assert_eq!(back.residual_norms, log.residual_norms);
        assert_eq!(back.solution_norms, log.solution_norms);
    }

    #[test]
    fn order_truncation() {
        let t = TemporalBasis::new(DMatrix::from_fn(4, 10, |i, j| (i * 10 + j) as f64)).unwrap();
        let one = truncate_order(&t, 3, 1, 2, false).unwrap();
        assert_eq!(one.matrix.ncols(), 3);
        assert_eq!(one.matrix.column(2), t.matrix.column(2));
        assert!(truncate_order(&one, 1, 3, 2, false).is_err());
        assert_eq!(truncate_order(&t, 3, 1, 2, true).unwrap().matrix.ncols(), 4);
    }
}
