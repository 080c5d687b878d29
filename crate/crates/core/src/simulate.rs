//! Synthetic ground truth: phantoms, coil maps, trajectories, B0 patterns,
//! prescan echoes and raw data.
//!
//! The forward model here is a plain loop over samples, coils and voxels
//! that shares no code with the reconstruction kernels, so it can serve as
//! an oracle for them.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PrescanData, RawCoilData, SensitivityMaps, SpatialBasis, TemporalBasis};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::recon::bases::{build_bases, harmonic_count};

pub use crate::recon::bases::solid_harmonics;

/// Largest dense encoding matrix (elements) built by default.
pub const ORACLE_CAP: usize = 1 << 24;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLike,
    Discs,
    Checker,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-like" => Ok(PhantomKind::SheppLike),
            "discs" => Ok(PhantomKind::Discs),
            "checker" => Ok(PhantomKind::Checker),
            other => Err(Error::UnknownKind {
                what: "phantom",
                given: other.to_string(),
                options: "shepp-like, discs, checker".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Vec<Complex64>,
    pub support: Vec<bool>,
}

/// Voxel position scaled so the field of view spans `[-1, 1]` on active axes.
fn unit_coords(grid: &Grid) -> Vec<[f64; 3]> {
    grid.coordinates()
        .into_iter()
        .map(|r| {
            let mut u = [0.0; 3];
            for a in 0..3 {
                if grid.dims[a] > 1 {
                    u[a] = 2.0 * r[a] / grid.fov_m[a];
                }
            }
            u
        })
        .collect()
}

/// (center, semi-axes, rotation about z, added intensity)
type Ellipsoid = ([f64; 3], [f64; 3], f64, f64);

const SHEPP_LIKE: [Ellipsoid; 7] = [
    ([0.0, 0.0, 0.0], [0.69, 0.92, 0.81], 0.0, 1.0),
    ([0.0, -0.0184, 0.0], [0.6624, 0.874, 0.78], 0.0, -0.6),
    ([0.22, 0.0, 0.0], [0.11, 0.31, 0.22], -18f64 * PI / 180.0, -0.2),
    ([-0.22, 0.0, 0.0], [0.16, 0.41, 0.28], 18f64 * PI / 180.0, -0.2),
    ([0.0, 0.35, 0.0], [0.21, 0.25, 0.41], 0.0, 0.3),
    ([0.0, 0.1, 0.0], [0.046, 0.046, 0.05], 0.0, 0.2),
    ([0.0, -0.605, 0.0], [0.046, 0.023, 0.05], 0.0, 0.2),
];

const DISCS: [([f64; 3], f64, f64); 4] = [
    ([-0.35, -0.3, 0.0], 0.3, 1.0),
    ([0.4, -0.25, 0.0], 0.25, 0.6),
    ([0.0, 0.4, 0.0], 0.35, 0.8),
    ([-0.05, -0.55, 0.0], 0.12, 0.4),
];

/// Cells per axis of the checker phantom.
pub const CHECKER_CELLS: usize = 8;

/// Piecewise-constant phantom. `smooth_phase` adds a gentle linear phase.
pub fn make_phantom(grid: &Grid, kind: PhantomKind, smooth_phase: bool) -> Phantom {
    let units = unit_coords(grid);
    let magnitude: Vec<f64> = units
        .iter()
        .enumerate()
        .map(|(l, u)| match kind {
            PhantomKind::SheppLike => SHEPP_LIKE
                .iter()
                .filter(|(c, a, theta, _)| {
                    let (dx, dy, dz) = (u[0] - c[0], u[1] - c[1], u[2] - c[2]);
                    let (s, co) = theta.sin_cos();
                    let xr = co * dx + s * dy;
                    let yr = -s * dx + co * dy;
                    (xr / a[0]).powi(2) + (yr / a[1]).powi(2) + (dz / a[2]).powi(2) <= 1.0
                })
                .map(|e| e.3)
                .sum::<f64>(),
            PhantomKind::Discs => DISCS
                .iter()
                .find(|(c, r, _)| {
                    (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2) + (u[2] - c[2]).powi(2) <= r * r
                })
                .map_or(0.0, |d| d.2),
            PhantomKind::Checker => {
                let c = grid.coords_of(l);
                let cell: usize = (0..3)
                    .map(|a| c[a] * CHECKER_CELLS / grid.dims[a].max(1))
                    .sum();
                if cell % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    let image = magnitude
        .iter()
        .zip(&units)
        .map(|(&m, u)| {
            let phase = if smooth_phase { 0.4 * u[0] - 0.25 * u[1] } else { 0.0 };
            Complex64::from_polar(m, phase)
        })
        .collect();
    Phantom {
        image,
        support: magnitude.iter().map(|&m| m != 0.0).collect(),
    }
}

/// Smooth receive coils arranged around the field of view: Gaussian
/// magnitude with width `decay` (fraction of the field of view) and a linear
/// phase ramp per coil.
pub fn synth_coils(grid: &Grid, gamma: usize, decay: f64) -> Result<SensitivityMaps> {
    if gamma == 0 {
        return Err(Error::InvalidArgument("at least one coil is required".into()));
    }
    if !(decay > 0.0) {
        return Err(Error::InvalidArgument("coil decay must be positive".into()));
    }
    let units = unit_coords(grid);
    let maps = DMatrix::from_fn(grid.len(), gamma, |l, c| {
        let angle = 2.0 * PI * c as f64 / gamma as f64 + PI / 2.0;
        let center = [1.2 * angle.cos(), 1.2 * angle.sin(), 0.0];
        let u = units[l];
        let d2: f64 = (0..3).map(|a| (u[a] - center[a]).powi(2)).sum();
        let width = 2.0 * decay;
        let magnitude = (-d2 / (2.0 * width * width)).exp();
        let phase = 0.5 * (angle.cos() * u[0] + angle.sin() * u[1]) + 0.3 * c as f64;
        Complex64::from_polar(magnitude, phase)
    });
    SensitivityMaps::new(maps)
}

/// Single-shot Archimedean spiral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpiralParams {
    /// samples per plane
    pub samples: usize,
    pub turns: f64,
    /// rad/m; `None` uses the largest radius inscribed in the grid's k-space
    pub k_max: Option<f64>,
    pub readout_s: f64,
    /// time of the first sample
    pub t0_s: f64,
}

impl Default for SpiralParams {
    fn default() -> Self {
        Self {
            samples: 4096,
            turns: 16.0,
            k_max: None,
            readout_s: 20e-3,
            t0_s: 0.0,
        }
    }
}

/// `π / pitch` on the smallest in-plane axis: the inscribed k-space radius.
pub fn inscribed_k_max(grid: &Grid) -> f64 {
    let p = grid.pitch();
    let mut k = f64::INFINITY;
    for a in 0..2 {
        if grid.dims[a] > 1 {
            k = k.min(PI / p[a]);
        }
    }
    k
}

/// `k(t) = k_max (t/T) (cos, sin)(2π turns t/T)` with uniform `t`; in 3D
/// one spiral per k_z plane of the grid, one after the other in time.
pub fn make_spiral(grid: &Grid, params: &SpiralParams) -> Result<TemporalBasis> {
    let k = params.samples;
    if k < 2 {
        return Err(Error::InvalidArgument("a spiral needs at least two samples".into()));
    }
    let k_max = params.k_max.unwrap_or_else(|| inscribed_k_max(grid));
    let d = grid.spatial_dims();
    let planes: Vec<f64> = if d == 3 {
        let dk = 2.0 * PI / grid.fov_m[2];
        let nz = grid.dims[2];
        (0..nz).map(|m| dk * (m as f64 - (nz / 2) as f64)).collect()
    } else {
        vec![0.0]
    };
    let dt = params.readout_s / (k - 1) as f64;
    let rows = k * planes.len();
    let mut m = DMatrix::zeros(rows, d + 1);
    for (pi, &kz) in planes.iter().enumerate() {
        for i in 0..k {
            let s = i as f64 / (k - 1) as f64;
            let row = pi * k + i;
            let angle = 2.0 * PI * params.turns * s;
            m[(row, 0)] = params.t0_s + (row as f64) * dt;
            m[(row, 1)] = k_max * s * angle.cos();
            m[(row, 2)] = k_max * s * angle.sin();
            if d == 3 {
                m[(row, 3)] = kz;
            }
        }
    }
    TemporalBasis::new(m)
}

/// Cartesian raster over the FFT grid, `k = Δk (m - n/2)` on every active
/// axis, keeping every `r`-th line along `axis`. Axis 0 is the readout and
/// varies fastest.
pub fn make_cartesian(grid: &Grid, r: usize, axis: usize, dwell_s: f64) -> Result<TemporalBasis> {
    if r == 0 {
        return Err(Error::InvalidArgument("undersampling factor must be >= 1".into()));
    }
    let d = grid.spatial_dims();
    if axis >= d {
        return Err(Error::InvalidArgument(format!("undersampling axis {axis} is not active")));
    }
    let kaxis = |a: usize, m: usize| 2.0 * PI / grid.fov_m[a] * (m as f64 - (grid.dims[a] / 2) as f64);
    let mut rows = Vec::new();
    for l in 0..grid.len() {
        let c = grid.coords_of(l);
        if c[axis] % r != 0 {
            continue;
        }
        let mut row = vec![0.0; d + 1];
        for a in 0..d {
            row[a + 1] = kaxis(a, c[a]);
        }
        rows.push(row);
    }
    let n = rows.len();
    let m = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { i as f64 * dwell_s } else { rows[i][j] });
    TemporalBasis::new(m)
}

/// Adds synthetic higher-order field terms (and optionally the global term)
/// to a first-order trajectory, in the column order of
/// [`solid_harmonics`]. Amplitudes are chosen so each term contributes on
/// the order of one radian at the edge of a 0.2 m field of view.
pub fn add_field_terms(linear: &TemporalBasis, order: u8, spatial_dims: usize, constant: bool) -> Result<TemporalBasis> {
    let first = harmonic_count(1, spatial_dims, false)?;
    if linear.n_terms() != first {
        return Err(Error::Dimension(format!(
            "expected a first-order trajectory with {first} terms, got {}",
            linear.n_terms()
        )));
    }
    let total = harmonic_count(order, spatial_dims, constant)?;
    let k = linear.n_samples();
    let times = linear.times();
    let (t0, t1) = (times[0], times[k - 1]);
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };
    let mut m = DMatrix::zeros(k, total + 1);
    let offset = constant as usize;
    for i in 0..k {
        let s = (times[i] - t0) / span;
        m[(i, 0)] = times[i];
        if constant {
            m[(i, 1)] = 0.5 * (2.0 * PI * s).sin();
        }
        for p in 0..first {
            m[(i, 1 + offset + p)] = linear.matrix[(i, 1 + p)];
        }
        for p in first..total - offset {
            let amplitude = if p < harmonic_count(2, spatial_dims, false)? { 100.0 } else { 500.0 };
            m[(i, 1 + offset + p)] = amplitude * s * (2.0 * PI * (p as f64 + 1.0) * s + p as f64).sin();
        }
    }
    TemporalBasis::new(m)
}

/// Static off-resonance pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "kebab-case")]
pub enum B0Pattern {
    Zero,
    /// linear in x, reaching `±peak_rad_s` at the edges of the field of view
    LinearRamp { peak_rad_s: f64 },
    /// Gaussian blob of width `width` (fraction of the field of view)
    Blob { peak_rad_s: f64, width: f64 },
}

impl Default for B0Pattern {
    fn default() -> Self {
        B0Pattern::Zero
    }
}

pub fn make_b0(grid: &Grid, pattern: B0Pattern) -> Vec<f64> {
    let units = unit_coords(grid);
    units
        .iter()
        .map(|u| match pattern {
            B0Pattern::Zero => 0.0,
            B0Pattern::LinearRamp { peak_rad_s } => peak_rad_s * u[0],
            B0Pattern::Blob { peak_rad_s, width } => {
                let d2 = (u[0] - 0.2).powi(2) + (u[1] + 0.3).powi(2) + u[2].powi(2);
                peak_rad_s * (-d2 / (2.0 * (2.0 * width).powi(2))).exp()
            }
        })
        .collect()
}

/// Complex Gaussian noise with standard deviation `sd` per real component.
pub fn complex_noise(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<Complex64> {
    if sd == 0.0 {
        return vec![ZERO; n];
    }
    let normal = Normal::new(0.0, sd).expect("finite, non-negative sd");
    (0..n)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect()
}

/// `σ[κ, λ] = Σ_l S[l, λ] ρ_l exp(i Σ_p K[κ, p] R[p, l])` plus noise,
/// evaluated element by element.
pub fn forward_signal(
    rho: &[Complex64],
    sens: &DMatrix<Complex64>,
    spatial: &SpatialBasis,
    temporal: &TemporalBasis,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Result<RawCoilData> {
    let l = rho.len();
    let terms = temporal.matrix.ncols();
    if sens.nrows() != l || spatial.matrix.ncols() != l || spatial.matrix.nrows() != terms {
        return Err(Error::Dimension("forward model inputs are inconsistent".into()));
    }
    let k = temporal.n_samples();
    let gamma = sens.ncols();
    let rows: Vec<Vec<Complex64>> = (0..k)
        .into_par_iter()
        .map(|kappa| {
            let mut out = vec![ZERO; gamma];
            for v in 0..l {
                if rho[v] == ZERO {
                    continue;
                }
                let mut phi = 0.0;
                for p in 0..terms {
                    phi += temporal.matrix[(kappa, p)] * spatial.matrix[(p, v)];
                }
                let e = Complex64::new(0.0, phi).exp() * rho[v];
                for (c, o) in out.iter_mut().enumerate() {
                    *o += sens[(v, c)] * e;
                }
            }
            out
        })
        .collect();
    let noise = complex_noise(rng, k * gamma, noise_sd);
    let samples = DMatrix::from_fn(k, gamma, |kappa, c| rows[kappa][c] + noise[kappa * gamma + c]);
    RawCoilData::new(samples)
}

/// Explicit encoding matrix with row `λ K + κ` and column `l`:
/// `E[(κ, λ), l] = S[l, λ] exp(i (K R)[κ, l])`.
pub fn dense_encoding_matrix(
    sens: &DMatrix<Complex64>,
    spatial: &SpatialBasis,
    temporal: &TemporalBasis,
    cap: usize,
) -> Result<DMatrix<Complex64>> {
    let k = temporal.n_samples();
    let gamma = sens.ncols();
    let l = sens.nrows();
    let elements = k * gamma * l;
    if elements > cap {
        return Err(Error::OracleCap { elements, cap });
    }
    let terms = temporal.matrix.ncols();
    if spatial.matrix.ncols() != l || spatial.matrix.nrows() != terms {
        return Err(Error::Dimension("oracle inputs are inconsistent".into()));
    }
    let mut e = DMatrix::from_element(k * gamma, l, ZERO);
    for c in 0..gamma {
        for kappa in 0..k {
            for v in 0..l {
                let mut phi = 0.0;
                for p in 0..terms {
                    phi += temporal.matrix[(kappa, p)] * spatial.matrix[(p, v)];
                }
                e[(c * k + kappa, v)] = sens[(v, c)] * Complex64::new(0.0, phi).exp();
            }
        }
    }
    Ok(e)
}

/// Stacks a `K x Γ` sample matrix in the row order of [`dense_encoding_matrix`].
pub fn stack_samples(sigma: &DMatrix<Complex64>) -> Vec<Complex64> {
    sigma.as_slice().to_vec()
}

/// Multi-echo prescan: `m_{n,λ}(r) = S_λ(r) b(r) |ρ(r)| exp(i (B0(r) TE_n + β mod(n, 2)))` plus noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_prescan(
    grid: &Grid,
    object: &[f64],
    sens: &SensitivityMaps,
    b0: &[f64],
    te_s: &[f64],
    beta: f64,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Result<PrescanData> {
    let l = grid.len();
    if object.len() != l || b0.len() != l || sens.n_voxels() != l {
        return Err(Error::Dimension("prescan inputs do not match the grid".into()));
    }
    let gamma = sens.n_coils();
    let mut images = Vec::with_capacity(l * gamma * te_s.len());
    for (n, te) in te_s.iter().enumerate() {
        let offset = if n % 2 == 1 { beta } else { 0.0 };
        for c in 0..gamma {
            for v in 0..l {
                let phase = b0[v] * te + offset;
                images.push(sens.maps[(v, c)] * Complex64::from_polar(object[v], phase));
            }
        }
    }
    let noise = complex_noise(rng, images.len(), noise_sd);
    for (m, e) in images.iter_mut().zip(noise) {
        *m += e;
    }
    PrescanData::new(*grid, gamma, te_s.to_vec(), images)
}

/// Smooth multiplicative bias `exp(a x + b y² ...)`, mean about 1.
pub fn bias_field(grid: &Grid, strength: f64) -> Vec<f64> {
    unit_coords(grid)
        .iter()
        .map(|u| (strength * (0.5 * u[0] - 0.3 * u[1] * u[1] + 0.2 * u[0] * u[1])).exp())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrajectoryConfig {
    Spiral(SpiralParams),
    Cartesian {
        #[serde(default = "one")]
        undersample: usize,
        #[serde(default = "one_axis")]
        axis: usize,
        #[serde(default = "default_dwell")]
        dwell_s: f64,
    },
}

fn one() -> usize {
    1
}

fn one_axis() -> usize {
    1
}

fn default_dwell() -> f64 {
    4e-6
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::Spiral(SpiralParams::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrescanConfig {
    pub echo_times_s: Vec<f64>,
    pub noise: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for PrescanConfig {
    fn default() -> Self {
        Self {
            echo_times_s: (0..6).map(|n| 1.5e-3 + n as f64 * 1.0e-3).collect(),
            noise: 0.01,
            beta: 0.05,
            bias: 0.3,
        }
    }
}

/// Settings of a synthetic dataset, mirrored by the `simulate` TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub dims: [usize; 3],
    pub fov_m: [f64; 3],
    pub coils: usize,
    pub coil_decay: f64,
    pub order: u8,
    pub constant_term: bool,
    /// raw-data noise, standard deviation per real component
    pub noise: f64,
    pub phantom: PhantomKind,
    pub smooth_phase: bool,
    pub trajectory: TrajectoryConfig,
    pub b0: B0Pattern,
    pub prescan: PrescanConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 1],
            fov_m: [0.22, 0.22, 0.22 / 32.0],
            coils: 4,
            coil_decay: 0.5,
            order: 1,
            constant_term: false,
            noise: 0.0,
            phantom: PhantomKind::SheppLike,
            smooth_phase: false,
            trajectory: TrajectoryConfig::default(),
            b0: B0Pattern::Zero,
            prescan: PrescanConfig::default(),
        }
    }
}

/// Everything a simulated acquisition produces, ground truth included.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub grid: Grid,
    pub phantom: Phantom,
    pub sens: SensitivityMaps,
    pub b0: Vec<f64>,
    pub bias: Vec<f64>,
    pub temporal: TemporalBasis,
    pub sigma: RawCoilData,
    pub prescan: PrescanData,
}

/// Builds the trajectory described by `config` on `grid`.
pub fn make_trajectory(grid: &Grid, config: &SimulationConfig) -> Result<TemporalBasis> {
    let linear = match &config.trajectory {
        TrajectoryConfig::Spiral(p) => make_spiral(grid, p)?,
        TrajectoryConfig::Cartesian {
            undersample,
            axis,
            dwell_s,
        } => make_cartesian(grid, *undersample, *axis, *dwell_s)?,
    };
    if config.order == 1 && !config.constant_term {
        Ok(linear)
    } else {
        add_field_terms(&linear, config.order, grid.spatial_dims(), config.constant_term)
    }
}

/// Runs the whole simulation with all randomness drawn from `seed`.
pub fn simulate(config: &SimulationConfig, seed: u64) -> Result<SimulatedData> {
    let grid = Grid::new(config.dims, config.fov_m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = make_phantom(&grid, config.phantom, config.smooth_phase);
    let sens = synth_coils(&grid, config.coils, config.coil_decay)?;
    let b0 = make_b0(&grid, config.b0);
    let temporal = make_trajectory(&grid, config)?;
    let all: Vec<usize> = (0..grid.len()).collect();
    let spatial = build_bases(&b0, &all, &grid, &temporal, config.order, config.constant_term)?;
    // The bias is a receive shading shared by both acquisitions. The prescan
    // object is uniform over the support, so maps scaled by the prescan
    // magnitude reproduce the phantom contrast after intensity correction.
    let bias = bias_field(&grid, config.prescan.bias);
    let shaded: Vec<Complex64> = phantom.image.iter().zip(&bias).map(|(v, b)| v * b).collect();
    let sigma = forward_signal(&shaded, &sens.maps, &spatial, &temporal, config.noise, &mut rng)?;
    let object: Vec<f64> = phantom
        .support
        .iter()
        .zip(&bias)
        .map(|(&s, b)| if s { *b } else { 0.0 })
        .collect();
    let prescan = simulate_prescan(
        &grid,
        &object,
        &sens,
        &b0,
        &config.prescan.echo_times_s,
        config.prescan.beta,
        config.prescan.noise,
        &mut rng,
    )?;
    Ok(SimulatedData {
        grid,
        phantom,
        sens,
        b0,
        bias,
        temporal,
        sigma,
        prescan,
    })
}
