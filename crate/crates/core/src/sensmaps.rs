//! Coil sensitivity maps from multi-echo prescan data.
//!
//! Initial estimates come from a per-voxel SVD over echoes. They are then
//! smoothed and extrapolated from the trusted mask onto the reconstruction
//! mask by a second-derivative penalized least-squares fit.

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::data::{MaskPair, PrescanData, SensitivityMaps};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::sparse::{difference_operator, CsrMatrix, NormalEquations, PreparedSystem, SolveSettings, WeightedBlock};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Initial sensitivity estimates `Ŝ`, `L x Γ`, zero outside the trusted mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSensitivity {
    pub values: DMatrix<Complex64>,
    /// Trusted voxels whose echo data were identically zero.
    pub flagged: Vec<bool>,
}

/// `1e-2 * Δ⁴`, with `Δ` the smallest active voxel pitch in meters.
pub fn default_alpha_s(grid: &Grid) -> f64 {
    1e-2 * grid.min_active_pitch().powi(4)
}

/// Dominant left singular vector of one voxel's `Γ x N` coil-by-echo matrix,
/// scaled by `σ₁/√N` and phase-anchored to the first echo.
fn voxel_estimate(m: &DMatrix<Complex64>) -> Option<Vec<Complex64>> {
    if m.iter().all(|v| *v == ZERO) {
        return None;
    }
    let n_echoes = m.ncols();
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let (best, sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let mut vec: Vec<Complex64> = u.column(best).iter().copied().collect();

    let anchor: Complex64 = vec.iter().zip(m.column(0).iter()).map(|(a, b)| a.conj() * b).sum();
    let gauge = if anchor.norm() > 0.0 {
        anchor / anchor.norm()
    } else {
        // first echo orthogonal to u: anchor on the largest component instead
        let big = vec
            .iter()
            .copied()
            .fold(ZERO, |acc, v| if v.norm() > acc.norm() { v } else { acc });
        big.conj() / big.norm()
    };
    let scale = sigma / (n_echoes as f64).sqrt();
    for v in &mut vec {
        *v *= gauge * scale;
    }
    Some(vec)
}

/// Per-voxel SVD estimate of the coil sensitivities on `trusted`.
pub fn estimate_svd(prescan: &PrescanData, trusted: &[bool]) -> Result<RawSensitivity> {
    let l_total = prescan.grid.len();
    if trusted.len() != l_total {
        return Err(Error::Dimension("trusted mask does not match the prescan grid".into()));
    }
    let gamma = prescan.n_coils;
    let n = prescan.n_echoes();
    let rows: Vec<Option<Vec<Complex64>>> = (0..l_total)
        .into_par_iter()
        .map(|l| {
            if !trusted[l] {
                return Some(vec![ZERO; gamma]);
            }
            let m = DMatrix::from_fn(gamma, n, |c, e| prescan.value(e, c, l));
            voxel_estimate(&m)
        })
        .collect();
    let mut values = DMatrix::from_element(l_total, gamma, ZERO);
    let mut flagged = vec![false; l_total];
    for (l, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => {
                for (c, v) in r.into_iter().enumerate() {
                    values[(l, c)] = v;
                }
            }
            None => flagged[l] = true,
        }
    }
    let n_flagged = flagged.iter().filter(|&&f| f).count();
    if n_flagged > 0 {
        warn!("{n_flagged} trusted voxels have all-zero prescan data; their sensitivities are set to 0");
    }
    Ok(RawSensitivity { values, flagged })
}

/// Stacked system: identity data block weighted by `M_T`, plus second
/// differences along each active axis weighted by `√α_S` on `M_R`.
pub struct SmoothingSystem {
    normal: NormalEquations,
    prepared: PreparedSystem,
    settings: SolveSettings,
}

impl SmoothingSystem {
    pub fn new(grid: &Grid, masks: &MaskPair, alpha_s: f64, settings: SolveSettings) -> Result<Self> {
        if !(alpha_s >= 0.0 && alpha_s.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha_s must be >= 0, got {alpha_s}")));
        }
        let l = grid.len();
        if masks.trusted.len() != l {
            return Err(Error::Dimension("masks do not match the grid".into()));
        }
        let indicator = |m: &[bool], w: f64| m.iter().map(|&b| if b { w } else { 0.0 }).collect::<Vec<f64>>();
        let mut blocks = vec![WeightedBlock {
            weights: indicator(&masks.trusted, 1.0),
            op: CsrMatrix::identity(l),
        }];
        if alpha_s > 0.0 {
            for axis in (0..3).filter(|&a| grid.dims[a] > 1) {
                let op = difference_operator(grid, axis, 2, &masks.recon)?;
                blocks.push(WeightedBlock {
                    weights: indicator(&masks.recon, alpha_s.sqrt()),
                    op,
                });
            }
        }
        let normal = NormalEquations::assemble(blocks)?;
        let prepared = normal.prepare(settings.precond)?;
        Ok(Self {
            normal,
            prepared,
            settings,
        })
    }

    pub fn normal_equations(&self) -> &NormalEquations {
        &self.normal
    }

    /// Smooth extrapolation of one real grid.
    pub fn solve(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let rhs = self.normal.rhs(0, raw)?;
        let out = self.prepared.solve(&rhs, self.settings.tol, self.settings.max_iter)?;
        if !out.converged {
            warn!(
                "map smoothing stopped after {} iterations at relative residual {:.3e}",
                out.iterations,
                out.residual_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Ok(out.x)
    }

    /// Real and imaginary parts smoothed independently.
    pub fn solve_complex(&self, raw: &[Complex64]) -> Result<Vec<Complex64>> {
        let re: Vec<f64> = raw.iter().map(|v| v.re).collect();
        let im: Vec<f64> = raw.iter().map(|v| v.im).collect();
        let (re, im) = rayon::join(|| self.solve(&re), || self.solve(&im));
        let (re, im) = (re?, im?);
        Ok(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect())
    }
}

/// Least-squares smoothing and extrapolation of a real grid from `M_T` to `M_R`.
pub fn smooth_extrapolate(
    raw: &[f64],
    grid: &Grid,
    masks: &MaskPair,
    alpha_s: f64,
    settings: SolveSettings,
) -> Result<Vec<f64>> {
    SmoothingSystem::new(grid, masks, alpha_s, settings)?.solve(raw)
}

/// Smooths magnitude and unit-phase parts of every coil separately and
/// recombines them.
pub fn recombine(
    raw: &RawSensitivity,
    grid: &Grid,
    masks: &MaskPair,
    alpha_s: f64,
    settings: SolveSettings,
) -> Result<SensitivityMaps> {
    let l = grid.len();
    if raw.values.nrows() != l {
        return Err(Error::Dimension("raw sensitivities do not match the grid".into()));
    }
    let system = SmoothingSystem::new(grid, masks, alpha_s, settings)?;
    let gamma = raw.values.ncols();
    let columns: Vec<Result<Vec<Complex64>>> = (0..gamma)
        .into_par_iter()
        .map(|c| {
            let col: Vec<Complex64> = raw.values.column(c).iter().copied().collect();
            let mag: Vec<f64> = col.iter().map(|v| v.norm()).collect();
            let unit: Vec<Complex64> = col
                .iter()
                .zip(&mag)
                .map(|(v, &m)| if m > 0.0 { v / m } else { ZERO })
                .collect();
            let smag = system.solve(&mag)?;
            let sunit = system.solve_complex(&unit)?;
            Ok((0..l)
                .map(|i| {
                    let u = sunit[i].norm();
                    if !masks.recon[i] || u < 1e-12 {
                        ZERO
                    } else {
                        sunit[i] * (smag[i] / u)
                    }
                })
                .collect())
        })
        .collect();
    let mut maps = DMatrix::from_element(l, gamma, ZERO);
    for (c, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            maps[(i, c)] = v;
        }
    }
    SensitivityMaps::new(maps)
}

/// `j_l = 1/√(Σ_λ |S_λ(r_l)|²)` on `M_R`, zero elsewhere.
pub fn intensity_correction(maps: &SensitivityMaps, recon: &[bool]) -> Vec<f64> {
    (0..maps.n_voxels())
        .map(|l| {
            let ss: f64 = maps.maps.row(l).iter().map(|v| v.norm_sqr()).sum();
            if recon[l] && ss > 0.0 {
                1.0 / ss.sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

/// SVD estimate followed by smoothing and recombination.
pub fn compute_sensitivity_maps(
    prescan: &PrescanData,
    masks: &MaskPair,
    alpha_s: f64,
    settings: SolveSettings,
) -> Result<SensitivityMaps> {
    let raw = estimate_svd(prescan, &masks.trusted)?;
    recombine(&raw, &prescan.grid, masks, alpha_s, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn line(n: usize) -> Grid {
        Grid::new([n, 1, 1], [n as f64, 1.0, 1.0]).unwrap()
    }

    fn settings() -> SolveSettings {
        SolveSettings::default()
    }

    #[test]
    fn rank_one_two_by_two() {
        let m = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]);
        let s = voxel_estimate(&m).unwrap();
        // independent oracle: σ₁ = ‖[1,2]‖·‖[1,2]‖ = 5, u = [1,2]/√5
        let scale = 5.0 / 5f64.sqrt() / 2f64.sqrt();
        assert!((s[0] - c(scale, 0.0)).norm() < 1e-14);
        assert!((s[1] - c(2.0 * scale, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn single_coil_uses_mean_power() {
        let m = DMatrix::from_row_slice(1, 3, &[c(0.0, 2.0), c(1.0, 0.0), c(0.0, -2.0)]);
        let s = voxel_estimate(&m).unwrap();
        // σ₁ = 3, u anchored to the phase of the first echo
        let expected = (9.0f64 / 3.0).sqrt();
        assert!((s[0] - c(0.0, expected)).norm() < 1e-14);
    }

    #[test]
    fn global_phase_follows_first_echo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = DMatrix::from_fn(4, 3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let phase = Complex64::from_polar(1.0, rng.random_range(-3.0..3.0));
            let a = voxel_estimate(&m).unwrap();
            let b = voxel_estimate(&m.map(|v| v * phase)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x * phase - y).norm() < 1e-12 * a[0].norm().max(1.0));
            }
            // anchor: Ŝᴴ m₁ is real and non-negative
            let anchor: Complex64 = a.iter().zip(m.column(0).iter()).map(|(u, v)| u.conj() * v).sum();
            assert!(anchor.im.abs() < 1e-12 && anchor.re >= 0.0);
        }
    }

    #[test]
    fn zero_voxel_is_flagged() {
        let g = line(2);
        let mut images = vec![c(1.0, 0.0); 2 * 2];
        images[1] = ZERO;
        images[3] = ZERO;
        let p = PrescanData::new(g, 1, vec![0.0, 1e-3], images).unwrap();
        let raw = estimate_svd(&p, &[true, true]).unwrap();
        assert_eq!(raw.flagged, vec![false, true]);
        assert_eq!(raw.values[(1, 0)], ZERO);
    }

    #[test]
    fn constant_is_reproduced_on_recon_mask() {
        let g = Grid::square_2d(10, 0.1).unwrap();
        let recon: Vec<bool> = (0..g.len()).map(|l| g.coords_of(l)[0] >= 1).collect();
        let trusted: Vec<bool> = (0..g.len()).map(|l| g.coords_of(l)[0] >= 4).collect();
        let masks = MaskPair::new(trusted.clone(), recon.clone()).unwrap();
        let raw: Vec<f64> = trusted.iter().map(|&t| if t { 2.5 } else { 0.0 }).collect();
        for alpha in [default_alpha_s(&g), 100.0 * default_alpha_s(&g)] {
            let s = smooth_extrapolate(&raw, &g, &masks, alpha, settings()).unwrap();
            for l in 0..g.len() {
                let expected = if recon[l] { 2.5 } else { 0.0 };
                assert!((s[l] - expected).abs() < 1e-9, "alpha {alpha} voxel {l}: {}", s[l]);
            }
        }
    }

    #[test]
    fn no_penalty_is_minimum_norm_completion() {
        let g = line(6);
        let masks = MaskPair::new(
            vec![true, true, false, false, true, true],
            vec![true; 6],
        )
        .unwrap();
        let raw = vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0];
        let s = smooth_extrapolate(&raw, &g, &masks, 0.0, settings()).unwrap();
        assert_eq!(s, vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn one_dimensional_toy_matches_dense_oracle() {
        let g = line(6);
        let trusted = vec![true, true, false, false, true, true];
        let masks = MaskPair::new(trusted.clone(), vec![true; 6]).unwrap();
        let raw = vec![1.0, 2.0, 0.0, 0.0, 5.0, 6.0];
        let alpha = 1e6;
        let s = smooth_extrapolate(&raw, &g, &masks, alpha, settings()).unwrap();

        // dense stacked system: 6 data rows, 4 second-difference rows (pitch 1)
        let mut a = DMatrix::<f64>::zeros(10, 6);
        let mut b = nalgebra::DVector::<f64>::zeros(10);
        for i in 0..6 {
            if trusted[i] {
                a[(i, i)] = 1.0;
                b[i] = raw[i];
            }
        }
        let w = alpha.sqrt();
        for i in 0..4 {
            a[(6 + i, i)] = w;
            a[(6 + i, i + 1)] = -2.0 * w;
            a[(6 + i, i + 2)] = w;
        }
        let oracle = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        for i in 0..6 {
            assert!((s[i] - oracle[i]).abs() < 1e-6, "{i}: {} vs {}", s[i], oracle[i]);
        }
        // interior voxels lie on the connecting line
        assert!((s[2] - 3.0).abs() < 1e-6 && (s[3] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn smoothing_is_linear() {
        let g = Grid::square_2d(12, 0.1).unwrap();
        let recon: Vec<bool> = (0..g.len())
            .map(|l| {
                let [x, y, _] = g.coords_of(l);
                (x as f64 - 5.5).powi(2) + (y as f64 - 5.5).powi(2) < 30.0
            })
            .collect();
        let trusted: Vec<bool> = (0..g.len())
            .map(|l| {
                let [x, y, _] = g.coords_of(l);
                recon[l] && (x as f64 - 5.5).powi(2) + (y as f64 - 5.5).powi(2) < 14.0
            })
            .collect();
        let masks = MaskPair::new(trusted, recon).unwrap();
        let sys = SmoothingSystem::new(&g, &masks, default_alpha_s(&g) * 100.0, settings()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = sys.solve(&x).unwrap();
        let fy = sys.solve(&y).unwrap();
        let fc = sys.solve(&combo).unwrap();
        let norm: f64 = fc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = (0..g.len())
            .map(|i| (fc[i] - a * fx[i] - b * fy[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-10 * norm, "{diff} vs {norm}");
    }

    #[test]
    fn recombine_constant_and_zero_coils() {
        let g = Grid::square_2d(8, 0.1).unwrap();
        let recon = vec![true; g.len()];
        let trusted: Vec<bool> = (0..g.len()).map(|l| g.coords_of(l)[1] < 6).collect();
        let masks = MaskPair::new(trusted.clone(), recon).unwrap();
        let value = Complex64::from_polar(1.3, 0.7);
        let mut raw = DMatrix::from_element(g.len(), 2, ZERO);
        for l in 0..g.len() {
            if trusted[l] {
                raw[(l, 0)] = value;
            }
        }
        let raw = RawSensitivity {
            values: raw,
            flagged: vec![false; g.len()],
        };
        let s = recombine(&raw, &g, &masks, default_alpha_s(&g), settings()).unwrap();
        for l in 0..g.len() {
            assert!((s.maps[(l, 0)] - value).norm() < 1e-9);
            assert_eq!(s.maps[(l, 1)], ZERO);
        }
    }

    #[test]
    fn recombine_full_mask_without_penalty_is_exact() {
        let g = Grid::square_2d(8, 0.1).unwrap();
        let masks = MaskPair::new(vec![true; g.len()], vec![true; g.len()]).unwrap();
        let coords = g.coordinates();
        let raw = DMatrix::from_fn(g.len(), 1, |l, _| {
            let r = coords[l];
            Complex64::from_polar(1.0 + 5.0 * r[0], 20.0 * r[1])
        });
        let raw = RawSensitivity {
            values: raw,
            flagged: vec![false; g.len()],
        };
        let s = recombine(&raw, &g, &masks, 0.0, settings()).unwrap();
        for l in 0..g.len() {
            let e = raw.values[(l, 0)];
            assert!((s.maps[(l, 0)] - e).norm() <= 1e-12 * e.norm());
        }
    }

    #[test]
    fn intensity_correction_examples() {
        let one = SensitivityMaps::new(DMatrix::from_element(4, 1, c(1.0, 0.0))).unwrap();
        assert_eq!(intensity_correction(&one, &[true; 4]), vec![1.0; 4]);
        let h = 0.5f64.sqrt();
        let two = SensitivityMaps::new(DMatrix::from_element(3, 2, c(h, 0.0))).unwrap();
        for j in intensity_correction(&two, &[true, false, true]).iter().zip([1.0, 0.0, 1.0]) {
            assert!((j.0 - j.1).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps = SensitivityMaps::new(DMatrix::from_fn(20, 3, |_, _| {
            c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
        .unwrap();
        let j = intensity_correction(&maps, &[true; 20]);
        for l in 0..20 {
            let ss: f64 = maps.maps.row(l).iter().map(|v| v.norm_sqr()).sum();
            assert!((j[l] * ss.sqrt() - 1.0).abs() < 1e-14);
        }
    }
}
