//! Conjugate-gradient reconstruction on the normal equations `E^H E ρ = E^H σ`.
//!
//! Two variants share one CG loop: [`recon_full`] keeps the whole phase
//! matrix `P` in memory, [`recon_split`] recomputes it block by block once
//! per iteration. Timing entries are labelled with the step numbers of the
//! reference algorithm listings.

pub mod bases;
pub mod kernels;
pub mod operator;

use std::time::Instant;

use log::{debug, info};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{ElementOrder, KSpaceFilter, RawCoilData, ReconImage, SpatialBasis, TemporalBasis};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kfilter::apply_filter;

pub use bases::{build_bases, conjugate_phase, harmonic_count, solid_harmonics};
pub use kernels::{phase_block, phase_bytes, PhaseBlock};
pub use operator::{
    even_block_starts, uniform_block_starts, validate_block_starts, EncodingOperator, Variant,
};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Everything a reconstruction needs. Voxel-indexed inputs (`spatial`
/// columns, `sens` rows, `intensity`) cover only the reconstruction mask,
/// listed in `voxels`; `filter` covers the whole grid.
#[derive(Clone, Debug)]
pub struct EncodingInputs {
    pub sigma: RawCoilData,
    pub spatial: SpatialBasis,
    pub temporal: TemporalBasis,
    /// `L_R x Γ`
    pub sens: DMatrix<Complex64>,
    pub intensity: Vec<f64>,
    pub filter: KSpaceFilter,
    pub grid: Grid,
    pub voxels: Vec<usize>,
    pub iterations: usize,
    pub element_order: ElementOrder,
}

impl EncodingInputs {
    pub fn validate(&self) -> Result<()> {
        let k = self.sigma.n_samples();
        let gamma = self.sigma.n_coils();
        let lr = self.voxels.len();
        if self.temporal.n_samples() != k {
            return Err(Error::Dimension(format!(
                "raw data has {k} samples, temporal basis {}",
                self.temporal.n_samples()
            )));
        }
        if self.spatial.matrix.nrows() != self.temporal.matrix.ncols() {
            return Err(Error::Dimension(format!(
                "spatial basis has {} rows, temporal basis {} columns",
                self.spatial.matrix.nrows(),
                self.temporal.matrix.ncols()
            )));
        }
        if self.spatial.n_voxels() != lr || self.sens.nrows() != lr || self.intensity.len() != lr {
            return Err(Error::Dimension(format!(
                "{lr} reconstruction voxels, but spatial basis covers {}, sensitivities {}, intensity correction {}",
                self.spatial.n_voxels(),
                self.sens.nrows(),
                self.intensity.len()
            )));
        }
        if self.sens.ncols() != gamma {
            return Err(Error::Dimension(format!(
                "raw data has {gamma} coils, sensitivities {}",
                self.sens.ncols()
            )));
        }
        if self.filter.mask.len() != self.grid.len() {
            return Err(Error::Dimension("k-space filter does not match the grid".into()));
        }
        let mut seen = vec![false; self.grid.len()];
        for &l in &self.voxels {
            if l >= self.grid.len() || seen[l] {
                return Err(Error::Dimension(format!("voxel index {l} is out of range or repeated")));
            }
            seen[l] = true;
        }
        Ok(())
    }

    /// Bytes of the full `K x L_R` phase matrix.
    pub fn full_phase_bytes(&self) -> u64 {
        phase_bytes(self.sigma.n_samples(), self.voxels.len())
    }

    /// Largest block row count whose phase block fits `budget`, at least 1.
    pub fn rows_within(&self, budget: u64) -> usize {
        let per_row = phase_bytes(1, self.voxels.len()).max(1);
        ((budget / per_row) as usize).clamp(1, self.sigma.n_samples().max(1))
    }
}

/// Wall-clock time of one labelled step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub label: String,
    pub seconds: f64,
}

/// Per-iteration norms and step timings of one reconstruction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CGLog {
    pub residual_norms: Vec<f64>,
    pub solution_norms: Vec<f64>,
    pub iteration_seconds: Vec<f64>,
    pub timings: Vec<PhaseTiming>,
}

impl CGLog {
    pub fn iterations(&self) -> usize {
        self.residual_norms.len()
    }

    fn time(&mut self, label: &str, start: Instant) {
        let seconds = start.elapsed().as_secs_f64();
        debug!("{label}: {seconds:.4} s");
        self.timings.push(PhaseTiming {
            label: label.to_string(),
            seconds,
        });
    }

    /// Total seconds over timings whose label starts with `prefix`.
    pub fn seconds(&self, prefix: &str) -> f64 {
        self.timings
            .iter()
            .filter(|t| t.label.starts_with(prefix))
            .map(|t| t.seconds)
            .sum()
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

struct Labels {
    correction: &'static str,
    init: &'static str,
    adjoint: &'static str,
    normal: &'static str,
    update: &'static str,
    rescale: &'static str,
    filter: &'static str,
}

const FULL_LABELS: Labels = Labels {
    correction: "line 1: intensity correction",
    init: "line 2: initialize P",
    adjoint: "line 3: E^H sigma",
    normal: "line 8: E^H E p",
    update: "lines 9-15: CG update",
    rescale: "line 18: rho * j",
    filter: "line 19: k-space filter",
};

const SPLIT_LABELS: Labels = Labels {
    correction: "line 1: intensity correction",
    init: "lines 2-3: transpose K and Sigma",
    adjoint: "lines 4-11: E^H sigma",
    normal: "lines 16-25: E^H E p",
    update: "lines 26-32: CG update",
    rescale: "line 35: rho * j",
    filter: "line 36: k-space filter",
};

/// Detected default memory budget: half of `MemAvailable`, or 4 GiB when
/// it cannot be read.
pub fn default_memory_budget() -> u64 {
    let fallback = 4u64 << 30;
    let Ok(text) = std::fs::read_to_string("/proc/meminfo") else {
        return fallback;
    };
    text.lines()
        .find_map(|line| {
            let rest = line.strip_prefix("MemAvailable:")?;
            let kib: u64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            Some(kib * 1024 / 2)
        })
        .unwrap_or(fallback)
}

/// Scales the reconstruction-voxel result by `j`, scatters it onto the grid
/// and applies the k-space filter. An all-ones filter is skipped, which
/// keeps voxels outside the mask exactly zero.
pub fn finalize_image(inputs: &EncodingInputs, rho: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut image = vec![ZERO; inputs.grid.len()];
    for ((&l, v), j) in inputs.voxels.iter().zip(rho).zip(&inputs.intensity) {
        image[l] = v * j;
    }
    if inputs.filter.mask.iter().all(|&f| f == 1.0) {
        return Ok(image);
    }
    apply_filter(&image, &inputs.grid, &inputs.filter)
}

/// CG on the normal equations with an observer called after every iteration
/// with the 1-based iteration number and the current (intensity-corrected,
/// reconstruction-voxel) solution.
pub fn reconstruct(
    inputs: &EncodingInputs,
    variant: Variant,
    observer: &mut dyn FnMut(usize, &[Complex64]),
) -> Result<(ReconImage, CGLog)> {
    inputs.validate()?;
    let labels = if variant == Variant::Full {
        &FULL_LABELS
    } else {
        &SPLIT_LABELS
    };
    let mut log = CGLog::default();

    let t = Instant::now();
    let mut sens = inputs.sens.clone();
    for (l, j) in inputs.intensity.iter().enumerate() {
        for c in 0..sens.ncols() {
            sens[(l, c)] *= *j;
        }
    }
    log.time(labels.correction, t);

    let t = Instant::now();
    let op = EncodingOperator::new(&inputs.spatial, &inputs.temporal, &sens, inputs.element_order, variant)?;
    log.time(labels.init, t);

    let t = Instant::now();
    let mut p = op.apply_eh(&inputs.sigma.samples)?;
    log.time(labels.adjoint, t);

    let mut r = p.clone();
    let mut rho = vec![ZERO; p.len()];
    let mut alpha = dot(&r, &r).re;
    for n in 1..=inputs.iterations {
        if alpha == 0.0 {
            info!("residual vanished after {} iterations", n - 1);
            break;
        }
        let start = Instant::now();
        let t = Instant::now();
        let q = op.apply_normal(&p)?;
        log.time(labels.normal, t);

        let t = Instant::now();
        let beta = dot(&p, &q).re;
        let step = alpha / beta;
        if !step.is_finite() || beta <= 0.0 {
            return Err(Error::SolverBreakdown { iteration: n });
        }
        for ((x, d), (ri, qi)) in rho.iter_mut().zip(&p).zip(r.iter_mut().zip(&q)) {
            *x += d * step;
            *ri -= qi * step;
        }
        let previous = alpha;
        alpha = dot(&r, &r).re;
        let ratio = alpha / previous;
        for (d, ri) in p.iter_mut().zip(&r) {
            *d = ri + *d * ratio;
        }
        log.time(labels.update, t);

        let res = alpha.sqrt();
        let sol = norm(&rho);
        if !(res.is_finite() && sol.is_finite()) {
            return Err(Error::SolverBreakdown { iteration: n });
        }
        log.residual_norms.push(res);
        log.solution_norms.push(sol);
        log.iteration_seconds.push(start.elapsed().as_secs_f64());
        observer(n, &rho);
    }

    let t = Instant::now();
    let mut image = vec![ZERO; inputs.grid.len()];
    for ((&l, v), j) in inputs.voxels.iter().zip(&rho).zip(&inputs.intensity) {
        image[l] = v * j;
    }
    log.time(labels.rescale, t);

    let t = Instant::now();
    let values = if inputs.filter.mask.iter().all(|&f| f == 1.0) {
        image
    } else {
        apply_filter(&image, &inputs.grid, &inputs.filter)?
    };
    log.time(labels.filter, t);

    let recon = ReconImage {
        values,
        iterations: log.iterations(),
        final_residual_norm: alpha.max(0.0).sqrt(),
        final_solution_norm: norm(&rho),
    };
    Ok((recon, log))
}

/// Reconstruction with the whole phase matrix in memory. Fails with
/// [`Error::MemoryBudget`] when `P` does not fit `budget` bytes.
pub fn recon_full(inputs: &EncodingInputs, budget: u64) -> Result<(ReconImage, CGLog)> {
    let required = inputs.full_phase_bytes();
    if required > budget {
        return Err(Error::MemoryBudget { required, budget });
    }
    reconstruct(inputs, Variant::Full, &mut |_, _| {})
}

/// Block-wise reconstruction; `starts` are 0-based block starts ending with `K`.
pub fn recon_split(inputs: &EncodingInputs, starts: &[usize]) -> Result<(ReconImage, CGLog)> {
    validate_block_starts(starts, inputs.sigma.n_samples())?;
    reconstruct(
        inputs,
        Variant::Split {
            starts: starts.to_vec(),
        },
        &mut |_, _| {},
    )
}

/// How to hold the phase matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Full variant if it fits the budget, else the largest blocks that do.
    Auto,
    /// Always the full variant.
    Full,
    /// Split variant with this many samples per block.
    Rows(usize),
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SplitMode::Auto),
            "full" => Ok(SplitMode::Full),
            other => match other.parse::<usize>() {
                Ok(rows) if rows > 0 => Ok(SplitMode::Rows(rows)),
                _ => Err(Error::UnknownKind {
                    what: "split mode",
                    given: other.to_string(),
                    options: "auto, full, or a positive row count".into(),
                }),
            },
        }
    }
}

/// Picks the variant for `mode` under `budget`.
pub fn choose_variant(inputs: &EncodingInputs, mode: SplitMode, budget: u64) -> Result<Variant> {
    let k = inputs.sigma.n_samples();
    match mode {
        SplitMode::Full => {
            let required = inputs.full_phase_bytes();
            if required > budget {
                return Err(Error::MemoryBudget { required, budget });
            }
            Ok(Variant::Full)
        }
        SplitMode::Rows(rows) => Ok(Variant::Split {
            starts: uniform_block_starts(k, rows)?,
        }),
        SplitMode::Auto => {
            if inputs.full_phase_bytes() <= budget {
                Ok(Variant::Full)
            } else {
                let rows = inputs.rows_within(budget);
                info!("phase matrix exceeds the memory budget; splitting into blocks of {rows} samples");
                Ok(Variant::Split {
                    starts: uniform_block_starts(k, rows)?,
                })
            }
        }
    }
}
