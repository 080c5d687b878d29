//! Static off-resonance maps from multi-echo prescan phase.
//!
//! Echo images are coil-combined with the sensitivity maps, the phase of the
//! first echo is removed, the phase evolution is unwrapped along echoes and
//! fitted with a slope plus an even/odd offset. The fitted map is then
//! smoothed with first-difference penalties weighted by the fit error, so
//! that reliable voxels (small error) keep their values and edges.

use std::f64::consts::PI;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::data::{FieldMap, PrescanData, SensitivityMaps};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::sparse::{difference_operator, CsrMatrix, NormalEquations, SolveSettings, WeightedBlock};

/// Fit error assigned to voxels without signal.
pub const NO_SIGNAL_STDERR: f64 = PI;

/// Matched-filter coil combination of every echo:
/// `ρ_n = Σ_λ conj(S_λ) m_{n,λ} / Σ_λ |S_λ|²`, zero where the denominator is zero.
pub fn coil_combine(prescan: &PrescanData, maps: &SensitivityMaps) -> Result<Vec<Vec<Complex64>>> {
    let l_total = prescan.grid.len();
    if maps.n_voxels() != l_total || maps.n_coils() != prescan.n_coils {
        return Err(Error::Dimension(format!(
            "sensitivities are {}x{}, prescan has {} voxels and {} coils",
            maps.n_voxels(),
            maps.n_coils(),
            l_total,
            prescan.n_coils
        )));
    }
    let denom: Vec<f64> = (0..l_total)
        .map(|l| maps.maps.row(l).iter().map(|s| s.norm_sqr()).sum())
        .collect();
    Ok((0..prescan.n_echoes())
        .map(|n| {
            (0..l_total)
                .into_par_iter()
                .map(|l| {
                    if denom[l] == 0.0 {
                        return Complex64::new(0.0, 0.0);
                    }
                    let num: Complex64 = (0..prescan.n_coils)
                        .map(|c| maps.maps[(l, c)].conj() * prescan.value(n, c, l))
                        .sum();
                    num / denom[l]
                })
                .collect()
        })
        .collect())
}

/// Adds multiples of 2π so that consecutive differences lie in `(-π, π]`.
pub fn unwrap_temporal(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut turns = 0.0;
    for (n, &p) in phases.iter().enumerate() {
        if n > 0 {
            let d = p - phases[n - 1];
            let mut j = ((-PI - d) / (2.0 * PI)).floor() + 1.0;
            while d + 2.0 * PI * j <= -PI {
                j += 1.0;
            }
            while d + 2.0 * PI * j > PI {
                j -= 1.0;
            }
            turns += j;
        }
        out.push(p + 2.0 * PI * turns);
    }
    out
}

/// Per-voxel echo phases relative to the first echo, unwrapped along echoes.
/// Returns one vector of `N` phases per voxel, or `None` for voxels without
/// signal in any echo.
pub fn relative_phases(combined: &[Vec<Complex64>]) -> Vec<Option<Vec<f64>>> {
    let l_total = combined.first().map_or(0, |c| c.len());
    (0..l_total)
        .map(|l| {
            if combined.iter().any(|echo| echo[l] == Complex64::new(0.0, 0.0)) {
                return None;
            }
            let reference = combined[0][l].conj();
            let raw: Vec<f64> = combined.iter().map(|echo| (echo[l] * reference).arg()).collect();
            Some(unwrap_temporal(&raw))
        })
        .collect()
}

/// Least-squares fit of `φ_n = B0·n·ΔT_E + β·mod(n, 2)` for one voxel.
/// Returns `(B0, β, ε)` with `ε = √(Σ ε_n² / N)`.
pub fn fit_voxel(phases: &[f64], delta_te: f64) -> Result<(f64, f64, f64)> {
    let n_echoes = phases.len();
    if n_echoes < 3 {
        return Err(Error::InvalidArgument(format!(
            "phase fit needs at least 3 echoes, got {n_echoes}"
        )));
    }
    if !(delta_te > 0.0) {
        return Err(Error::InvalidArgument("echo spacing must be positive".into()));
    }
    // regressors n and mod(n, 2); the slope is converted to rad/s at the end
    let (mut saa, mut sab, mut sbb, mut sa_y, mut sb_y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, &y) in phases.iter().enumerate() {
        let a = n as f64;
        let b = (n % 2) as f64;
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sa_y += a * y;
        sb_y += b * y;
    }
    let det = saa * sbb - sab * sab;
    let slope = (sbb * sa_y - sab * sb_y) / det;
    let beta = (saa * sb_y - sab * sa_y) / det;
    let sq: f64 = phases
        .iter()
        .enumerate()
        .map(|(n, &y)| (y - slope * n as f64 - beta * (n % 2) as f64).powi(2))
        .sum();
    Ok((slope / delta_te, beta, (sq / n_echoes as f64).sqrt()))
}

/// Fits every voxel. Voxels without signal get `B0 = β = 0` and
/// `ε = NO_SIGNAL_STDERR`, so the smoothing step fills them from neighbours.
pub fn fit_phase_evolution(unwrapped: &[Option<Vec<f64>>], delta_te: f64) -> Result<FieldMap> {
    let fits: Vec<Result<(f64, f64, f64)>> = unwrapped
        .par_iter()
        .map(|p| match p {
            Some(p) => fit_voxel(p, delta_te),
            None => Ok((0.0, 0.0, NO_SIGNAL_STDERR)),
        })
        .collect();
    let mut b0 = Vec::with_capacity(fits.len());
    let mut beta = Vec::with_capacity(fits.len());
    let mut stderr = Vec::with_capacity(fits.len());
    for f in fits {
        let (b, be, e) = f?;
        b0.push(b);
        beta.push(be);
        stderr.push(e);
    }
    let nyquist = PI / delta_te;
    let peak = b0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.8 * nyquist {
        warn!(
            "fitted |B0| reaches {peak:.1} rad/s, close to the temporal unwrapping limit {nyquist:.1} rad/s"
        );
    }
    FieldMap::new(b0, beta, stderr)
}

/// Coil combination, temporal unwrapping and phase fit in one step.
pub fn estimate_field_map(prescan: &PrescanData, maps: &SensitivityMaps) -> Result<FieldMap> {
    let spacing = prescan.echo_spacing();
    let uneven = prescan
        .te_s
        .windows(2)
        .any(|w| ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing);
    if uneven {
        warn!("echo times are not evenly spaced; fitting with the mean spacing {spacing:.3e} s");
    }
    let combined = coil_combine(prescan, maps)?;
    fit_phase_evolution(&relative_phases(&combined), spacing)
}

/// `Δ² / median(ε)²` over voxels with `ε > 0`, so the median penalty row
/// `√α_B·ε/Δ` has unit weight. Falls back to `Δ²` when every `ε` is zero.
pub fn default_alpha_b(grid: &Grid, stderr: &[f64]) -> f64 {
    let delta = grid.min_active_pitch();
    let mut positive: Vec<f64> = stderr.iter().copied().filter(|&e| e > 0.0).collect();
    if positive.is_empty() {
        return delta * delta;
    }
    positive.sort_by(f64::total_cmp);
    let median = positive[positive.len() / 2];
    (delta / median).powi(2)
}

/// Normal equations of `[I; √α_B diag(ε) D_x; √α_B diag(ε) D_y; ...]`.
pub fn b0_system(grid: &Grid, stderr: &[f64], alpha_b: f64) -> Result<NormalEquations> {
    if !(alpha_b >= 0.0 && alpha_b.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha_b must be >= 0, got {alpha_b}")));
    }
    let l = grid.len();
    if stderr.len() != l {
        return Err(Error::Dimension("fit error does not match the grid".into()));
    }
    let mut blocks = vec![WeightedBlock {
        weights: vec![1.0; l],
        op: CsrMatrix::identity(l),
    }];
    let support = vec![true; l];
    let scale = alpha_b.sqrt();
    for axis in (0..3).filter(|&a| grid.dims[a] > 1) {
        blocks.push(WeightedBlock {
            weights: stderr.iter().map(|e| scale * e).collect(),
            op: difference_operator(grid, axis, 1, &support)?,
        });
    }
    NormalEquations::assemble(blocks)
}

/// Error-weighted, edge-preserving smoothing of the fitted map.
pub fn smooth_b0(field: &FieldMap, grid: &Grid, alpha_b: f64, settings: SolveSettings) -> Result<Vec<f64>> {
    if field.b0.len() != grid.len() {
        return Err(Error::Dimension("field map does not match the grid".into()));
    }
    let system = b0_system(grid, &field.stderr, alpha_b)?;
    let rhs = system.rhs(0, &field.b0)?;
    let out = system.solve(&rhs, settings.precond, settings.tol, settings.max_iter)?;
    if !out.converged {
        warn!(
            "B0 smoothing stopped after {} iterations at relative residual {:.3e}",
            out.iterations,
            out.residual_history.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(out.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn single_unit_coil_is_identity() {
        let g = Grid::new([3, 1, 1], [3.0, 1.0, 1.0]).unwrap();
        let images: Vec<Complex64> = (0..6).map(|i| c(i as f64, -1.0)).collect();
        let p = PrescanData::new(g, 1, vec![0.0, 1e-3], images.clone()).unwrap();
        let s = SensitivityMaps::new(DMatrix::from_element(3, 1, c(1.0, 0.0))).unwrap();
        let rho = coil_combine(&p, &s).unwrap();
        assert_eq!(rho[0], images[..3].to_vec());
        assert_eq!(rho[1], images[3..].to_vec());
    }

    #[test]
    fn model_data_recovers_constant() {
        let g = Grid::new([1, 1, 1], [1.0; 3]).unwrap();
        let s = [c(0.5, 0.5), c(1.0, 0.0)];
        let value = c(2.0, -3.0);
        let images = vec![s[0] * value, s[1] * value, s[0] * value, s[1] * value];
        let p = PrescanData::new(g, 2, vec![0.0, 1e-3], images).unwrap();
        let maps = SensitivityMaps::new(DMatrix::from_row_slice(1, 2, &s)).unwrap();
        let rho = coil_combine(&p, &maps).unwrap();
        assert_eq!(rho[0][0], value);
    }

    #[test]
    fn combination_matches_per_voxel_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([5, 4, 1], [1.0; 3]).unwrap();
        let gamma = 3;
        let mut r = || c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let maps = SensitivityMaps::new(DMatrix::from_fn(g.len(), gamma, |_, _| r())).unwrap();
        let images: Vec<Complex64> = (0..g.len() * gamma * 2).map(|_| r()).collect();
        let p = PrescanData::new(g, gamma, vec![0.0, 1e-3], images).unwrap();
        let rho = coil_combine(&p, &maps).unwrap();
        for n in 0..2 {
            for l in 0..g.len() {
                let a = DMatrix::from_fn(gamma, 1, |i, _| maps.maps[(l, i)]);
                let b = DVector::from_fn(gamma, |i, _| p.value(n, i, l));
                let x = a.svd(true, true).solve(&b, 0.0).unwrap();
                assert!((rho[n][l] - x[0]).norm() <= 1e-13 * x[0].norm().max(1.0));
            }
        }
    }

    #[test]
    fn unwrap_examples() {
        let u = unwrap_temporal(&[0.0, 3.0, 6.2]);
        assert_eq!(u[..2], [0.0, 3.0]);
        assert!((u[2] - (6.2 - 2.0 * PI)).abs() < 1e-15);
        assert!((u[2] + 0.0832).abs() < 1e-4);
        assert_eq!(unwrap_temporal(&[0.0, 0.1, 0.2]), vec![0.0, 0.1, 0.2]);
    }

    #[test]
    fn unwrap_recovers_slopes_below_pi() {
        let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
        let truth: Vec<f64> = (0..8).map(|n| 2.5 * n as f64).collect();
        let u = unwrap_temporal(&truth.iter().map(|&x| wrap(x)).collect::<Vec<_>>());
        for (a, b) in u.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unwrap_aliases_slopes_above_pi() {
        // 5 rad per echo exceeds π: unwrapping returns the alias 5 - 2π per echo
        let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
        let truth: Vec<f64> = (0..6).map(|n| 5.0 * n as f64).collect();
        let u = unwrap_temporal(&truth.iter().map(|&x| wrap(x)).collect::<Vec<_>>());
        let off = u[5] - truth[5];
        assert!(off.abs() > 1.0, "unwrapping above the limit must not recover the slope");
        for (n, v) in u.iter().enumerate() {
            assert!((v - (5.0 - 2.0 * PI) * n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn unwrapped_differences_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let p: Vec<f64> = (0..10).map(|_| rng.random_range(-20.0..20.0)).collect();
            let u = unwrap_temporal(&p);
            for w in u.windows(2) {
                let d = w[1] - w[0];
                assert!(d > -PI && d <= PI, "{d}");
            }
            for (a, b) in u.iter().zip(&p) {
                let k = (a - b) / (2.0 * PI);
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_fits() {
        let (b0, beta, e) = fit_voxel(&[0.0, 0.1, 0.2, 0.3], 1e-3).unwrap();
        assert!((b0 - 100.0).abs() < 1e-10 && beta.abs() < 1e-14 && e < 1e-15);
        let (b0, beta, e) = fit_voxel(&[0.0, 0.15, 0.2, 0.35], 1e-3).unwrap();
        assert!((b0 - 100.0).abs() < 1e-10 && (beta - 0.05).abs() < 1e-14 && e < 1e-15);
        assert!(fit_voxel(&[0.0, 0.1], 1e-3).is_err());
    }

    #[test]
    fn fit_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dte = 1.2e-3;
        for n_echoes in 3..8 {
            let phases: Vec<f64> = (0..n_echoes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (b0, beta, e) = fit_voxel(&phases, dte).unwrap();
            let a = DMatrix::from_fn(n_echoes, 2, |n, j| if j == 0 { n as f64 * dte } else { (n % 2) as f64 });
            let y = DVector::from_vec(phases.clone());
            let x = a.clone().svd(true, true).solve(&y, 0.0).unwrap();
            let res = &y - &a * &x;
            let eps = (res.norm_squared() / n_echoes as f64).sqrt();
            assert!((b0 - x[0]).abs() <= 1e-12 * x[0].abs().max(1.0));
            assert!((beta - x[1]).abs() <= 1e-12 * x[1].abs().max(1.0));
            assert!((e - eps).abs() <= 1e-12);
        }
    }

    fn line(n: usize) -> Grid {
        Grid::new([n, 1, 1], [n as f64, 1.0, 1.0]).unwrap()
    }

    fn field(b0: Vec<f64>, stderr: Vec<f64>) -> FieldMap {
        let n = b0.len();
        FieldMap::new(b0, vec![0.0; n], stderr).unwrap()
    }

    #[test]
    fn zero_error_leaves_map_unchanged() {
        let g = Grid::square_2d(6, 0.06).unwrap();
        let b0: Vec<f64> = (0..g.len()).map(|l| (l as f64 * 0.37).sin() * 50.0).collect();
        let out = smooth_b0(&field(b0.clone(), vec![0.0; g.len()]), &g, 10.0, SolveSettings::default()).unwrap();
        assert_eq!(out, b0);
    }

    #[test]
    fn constant_map_is_fixed() {
        let g = Grid::square_2d(6, 0.06).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let stderr: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let out = smooth_b0(&field(vec![42.0; g.len()], stderr), &g, 0.3, SolveSettings::default()).unwrap();
        for v in out {
            assert!((v - 42.0).abs() < 1e-10);
        }
    }

    fn step_instance() -> (Grid, Vec<f64>, Vec<f64>) {
        let g = line(32);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut b0 = vec![0.0; 32];
        let mut stderr = vec![0.0; 32];
        for l in 0..32 {
            b0[l] = if l < 20 { -50.0 } else { 80.0 };
            if (4..12).contains(&l) {
                b0[l] += rng.random_range(-20.0..20.0);
                stderr[l] = 2.0;
            }
        }
        (g, b0, stderr)
    }

    #[test]
    fn step_edge_is_preserved_and_band_smoothed() {
        let (g, b0, stderr) = step_instance();
        let alpha = 25.0;
        let out = smooth_b0(&field(b0.clone(), stderr.clone()), &g, alpha, SolveSettings::default()).unwrap();

        // dense stack: 32 identity rows and 31 weighted forward differences (pitch 1)
        let mut a = DMatrix::<f64>::zeros(63, 32);
        let mut y = DVector::<f64>::zeros(63);
        for l in 0..32 {
            a[(l, l)] = 1.0;
            y[l] = b0[l];
        }
        for l in 0..31 {
            let w = alpha.sqrt() * stderr[l];
            a[(32 + l, l)] = -w;
            a[(32 + l, l + 1)] = w;
        }
        let oracle = a.svd(true, true).solve(&y, 0.0).unwrap();
        for l in 0..32 {
            assert!((out[l] - oracle[l]).abs() < 1e-8);
        }
        for l in [19, 20] {
            assert!((out[l] - b0[l]).abs() < 1e-8);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(&out[4..12]) * 10.0 <= var(&b0[4..12]));
    }

    #[test]
    fn smoothing_minimizes_objective_and_is_shift_equivariant() {
        let (g, b0, stderr) = step_instance();
        let alpha = 25.0;
        let settings = SolveSettings::default();
        let out = smooth_b0(&field(b0.clone(), stderr.clone()), &g, alpha, settings).unwrap();
        let sys = b0_system(&g, &stderr, alpha).unwrap();
        let best = sys.objective(0, &b0, &out);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let pert: Vec<f64> = out.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            assert!(sys.objective(0, &b0, &pert) > best);
        }
        let shifted: Vec<f64> = b0.iter().map(|v| v + 7.0).collect();
        let out2 = smooth_b0(&field(shifted, stderr), &g, alpha, settings).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            assert!((b - a - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn no_signal_voxels_get_maximal_error() {
        let fm = fit_phase_evolution(&[None, Some(vec![0.0, 0.1, 0.2])], 1e-3).unwrap();
        assert_eq!(fm.stderr[0], NO_SIGNAL_STDERR);
        assert!((fm.b0[1] - 100.0).abs() < 1e-10);
    }
}
