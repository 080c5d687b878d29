//! Image-quality and stopping diagnostics: SSIM, relative RMSE and the
//! corner of the L-curve traced by CG iterates.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::recon::CGLog;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// odd side length of the Gaussian window
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// `None` uses `max(ref) - min(ref)`
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimResult {
    pub mean: f64,
    /// one value per valid window position, x fastest
    pub map: Vec<f64>,
    pub map_dims: [usize; 3],
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `nx x ny` slice.
fn filter_slice(img: &[f64], nx: usize, ny: usize, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let (ox, oy) = (nx - n + 1, ny - n + 1);
    let mut rows = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            let mut s = 0.0;
            for (i, wi) in w.iter().enumerate() {
                s += wi * img[x + i + nx * y];
            }
            rows[x + ox * y] = s;
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            let mut s = 0.0;
            for (j, wj) in w.iter().enumerate() {
                s += wj * rows[x + ox * (y + j)];
            }
            out[x + ox * y] = s;
        }
    }
    out
}

/// Mean SSIM of two real images, slice by slice over valid window positions.
/// With a mask, only windows centered on masked voxels enter the mean.
pub fn ssim(
    test: &[f64],
    reference: &[f64],
    grid: &Grid,
    mask: Option<&[bool]>,
    params: &SsimParams,
) -> Result<SsimResult> {
    let l = grid.len();
    if test.len() != l || reference.len() != l || mask.is_some_and(|m| m.len() != l) {
        return Err(Error::Dimension(format!(
            "ssim inputs must have {l} voxels (test {}, reference {})",
            test.len(),
            reference.len()
        )));
    }
    let n = params.window;
    let [nx, ny, nz] = grid.dims;
    if n == 0 || n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("ssim window must be odd, got {n}")));
    }
    if nx < n || ny < n {
        return Err(Error::Dimension(format!(
            "slices of {nx}x{ny} are smaller than the {n}x{n} window"
        )));
    }
    let range = match params.data_range {
        Some(r) => r,
        None => {
            let max = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = reference.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        }
    };
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument("reference image is constant".into()));
    }
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let w = gaussian_window(n, params.sigma);
    let (ox, oy) = (nx - n + 1, ny - n + 1);
    let plane = nx * ny;
    let map: Vec<f64> = (0..nz)
        .into_par_iter()
        .flat_map_iter(|z| {
            let a = &test[z * plane..(z + 1) * plane];
            let b = &reference[z * plane..(z + 1) * plane];
            let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
            let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
            let mu_a = filter_slice(a, nx, ny, &w);
            let mu_b = filter_slice(b, nx, ny, &w);
            let e_aa = filter_slice(&aa, nx, ny, &w);
            let e_bb = filter_slice(&bb, nx, ny, &w);
            let e_ab = filter_slice(&ab, nx, ny, &w);
            (0..ox * oy)
                .map(|i| {
                    let (ma, mb) = (mu_a[i], mu_b[i]);
                    let va = e_aa[i] - ma * ma;
                    let vb = e_bb[i] - mb * mb;
                    let cov = e_ab[i] - ma * mb;
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let half = n / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        for y in 0..oy {
            for x in 0..ox {
                let keep = mask.is_none_or(|m| m[grid.index(x + half, y + half, z)]);
                if keep {
                    sum += map[x + ox * (y + oy * z)];
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask("no ssim window is centered inside the mask".into()));
    }
    Ok(SsimResult {
        mean: sum / count as f64,
        map,
        map_dims: [ox, oy, nz],
    })
}

/// `sqrt(mean |test - ref|²) / sqrt(mean |ref|²)` over the mask.
pub fn rmse(test: &[Complex64], reference: &[Complex64], mask: Option<&[bool]>) -> Result<f64> {
    if test.len() != reference.len() || mask.is_some_and(|m| m.len() != test.len()) {
        return Err(Error::Dimension(format!(
            "rmse inputs differ in length ({} vs {})",
            test.len(),
            reference.len()
        )));
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    let mut count = 0usize;
    for i in 0..test.len() {
        if mask.is_none_or(|m| m[i]) {
            err += (test[i] - reference[i]).norm_sqr();
            norm += reference[i].norm_sqr();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask("rmse mask selects no voxels".into()));
    }
    if norm == 0.0 {
        return Err(Error::InvalidArgument("reference is zero over the mask".into()));
    }
    Ok((err / norm).sqrt())
}

/// Width of the moving average applied to L-curve points.
pub const LCURVE_SMOOTHING: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct LCurveCorner {
    /// 1-based CG iteration at maximal curvature
    pub iteration: usize,
    /// `|curvature|` per iteration; zero at the two ends
    pub curvature: Vec<f64>,
    /// set when the curve is essentially straight
    pub low_confidence: bool,
}

/// Centered moving average, truncated at the ends.
fn moving_average(v: &[f64], width: usize) -> Vec<f64> {
    let h = width / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Corner of the curve `(log ‖r_n‖, log ‖ρ_n‖)` as the point of maximal
/// curvature after smoothing. The result is a diagnostic only.
pub fn lcurve_corner(residual_norms: &[f64], solution_norms: &[f64]) -> Result<LCurveCorner> {
    let n = residual_norms.len();
    if n != solution_norms.len() {
        return Err(Error::Dimension("residual and solution logs differ in length".into()));
    }
    if n < 5 {
        return Err(Error::InvalidArgument(format!(
            "the L-curve needs at least 5 iterations, got {n}"
        )));
    }
    let logs = |v: &[f64]| -> Result<Vec<f64>> {
        v.iter()
            .map(|&x| {
                if x > 0.0 && x.is_finite() {
                    Ok(x.ln())
                } else {
                    Err(Error::InvalidArgument(format!("L-curve norms must be positive, got {x}")))
                }
            })
            .collect()
    };
    let x = moving_average(&logs(residual_norms)?, LCURVE_SMOOTHING);
    let y = moving_average(&logs(solution_norms)?, LCURVE_SMOOTHING);
    let mut curvature = vec![0.0; n];
    for i in 1..n - 1 {
        let dx = (x[i + 1] - x[i - 1]) / 2.0;
        let dy = (y[i + 1] - y[i - 1]) / 2.0;
        let ddx = x[i + 1] - 2.0 * x[i] + x[i - 1];
        let ddy = y[i + 1] - 2.0 * y[i] + y[i - 1];
        let speed = (dx * dx + dy * dy).powf(1.5);
        if speed > 0.0 {
            curvature[i] = ((dx * ddy - dy * ddx) / speed).abs();
        }
    }
    let (best, kmax) = curvature
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &k)| if k > acc.1 { (i, k) } else { acc });
    let span = {
        let ext = |v: &[f64]| {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        ext(&x).hypot(ext(&y))
    };
    Ok(LCurveCorner {
        iteration: best + 1,
        curvature,
        low_confidence: !(kmax * span > 1e-6),
    })
}

/// [`lcurve_corner`] on a CG log.
pub fn lcurve_corner_of(log: &CGLog) -> Result<LCurveCorner> {
    lcurve_corner(&log.residual_norms, &log.solution_norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct SSIM: full 2D Gaussian weights and windowed statistics per position.
    fn naive_ssim(a: &[f64], b: &[f64], nx: usize, ny: usize, p: &SsimParams) -> f64 {
        let n = p.window;
        let c = (n as f64 - 1.0) / 2.0;
        let mut w2 = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                w2[i + n * j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * p.sigma * p.sigma)).exp();
            }
        }
        let s: f64 = w2.iter().sum();
        w2.iter_mut().for_each(|v| *v /= s);
        let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = b.iter().copied().fold(f64::INFINITY, f64::min);
        let c1 = (p.k1 * (max - min)).powi(2);
        let c2 = (p.k2 * (max - min)).powi(2);
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=ny - n {
            for x0 in 0..=nx - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let k = x0 + i + nx * (y0 + j);
                        ma += w2[i + n * j] * a[k];
                        mb += w2[i + n * j] * b[k];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let k = x0 + i + nx * (y0 + j);
                        va += w2[i + n * j] * (a[k] - ma).powi(2);
                        vb += w2[i + n * j] * (b[k] - mb).powi(2);
                        cov += w2[i + n * j] * (a[k] - ma) * (b[k] - mb);
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::square_2d(24, 0.2).unwrap();
        let a = random_image(&mut rng, g.len());
        let r = ssim(&a, &a, &g, None, &SsimParams::default()).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.map.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negated_image_scores_negative() {
        // zero local mean, so the sign lands in the structure term
        let g = Grid::square_2d(24, 0.2).unwrap();
        let a: Vec<f64> = (0..g.len())
            .map(|l| {
                let c = g.coords_of(l);
                if (c[0] + c[1]) % 2 == 0 { 1.0 } else { -1.0 }
            })
            .collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(ssim(&neg, &a, &g, None, &SsimParams::default()).unwrap().mean < 0.0);
    }

    #[test]
    fn matches_naive_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::square_2d(32, 0.2).unwrap();
        let p = SsimParams::default();
        for _ in 0..3 {
            let a = random_image(&mut rng, g.len());
            let b = random_image(&mut rng, g.len());
            let fast = ssim(&a, &b, &g, None, &p).unwrap().mean;
            let slow = naive_ssim(&a, &b, 32, 32, &p);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn slices_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Grid::new([16, 14, 3], [0.2, 0.2, 0.1]).unwrap();
        let a = random_image(&mut rng, g.len());
        let b = random_image(&mut rng, g.len());
        let r = ssim(&a, &b, &g, None, &SsimParams::default()).unwrap();
        assert_eq!(r.map_dims, [6, 4, 3]);
        let only_center: Vec<bool> = (0..g.len()).map(|l| l == g.index(5, 5, 1)).collect();
        let m = ssim(&a, &b, &g, Some(&only_center), &SsimParams::default()).unwrap();
        assert_eq!(m.mean, r.map[6 * 4]);
        let none = vec![false; g.len()];
        assert!(matches!(
            ssim(&a, &b, &g, Some(&none), &SsimParams::default()),
            Err(Error::EmptyMask(_))
        ));
        let small = Grid::square_2d(8, 0.2).unwrap();
        assert!(ssim(&a[..64], &b[..64], &small, None, &SsimParams::default()).is_err());
    }

    #[test]
    fn rmse_examples() {
        let r: Vec<Complex64> = (0..10).map(|i| Complex64::new(i as f64 + 1.0, 0.5)).collect();
        assert_eq!(rmse(&r, &r, None).unwrap(), 0.0);
        assert_eq!(rmse(&vec![Complex64::new(0.0, 0.0); 10], &r, None).unwrap(), 1.0);
        let mut t = r.clone();
        t[3] += Complex64::new(0.0, 2.0);
        let norm: f64 = r.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!((rmse(&t, &r, None).unwrap() - 2.0 / norm).abs() < 1e-15);
        assert!(matches!(rmse(&t, &r, Some(&[false; 10])), Err(Error::EmptyMask(_))));
    }

    /// Two straight segments in log-log space meeting at iteration `corner`.
    fn two_segments(n: usize, corner: usize) -> (Vec<f64>, Vec<f64>) {
        let mut res = Vec::new();
        let mut sol = Vec::new();
        for it in 1..=n {
            let (x, y) = if it <= corner {
                (-0.5 * (it as f64 - 1.0), 0.02 * (it as f64 - 1.0))
            } else {
                let s = (it - corner) as f64;
                (-0.5 * (corner as f64 - 1.0) - 0.01 * s, 0.02 * (corner as f64 - 1.0) + 0.3 * s)
            };
            res.push(x.exp());
            sol.push(y.exp());
        }
        (res, sol)
    }

    #[test]
    fn two_segment_corner() {
        let (res, sol) = two_segments(60, 20);
        let c = lcurve_corner(&res, &sol).unwrap();
        assert!((c.iteration as i64 - 20).abs() <= 2, "{}", c.iteration);
        assert!(!c.low_confidence);
    }

    #[test]
    fn straight_line_is_low_confidence() {
        let res: Vec<f64> = (0..30).map(|i| (-0.3 * i as f64).exp()).collect();
        let sol: Vec<f64> = (0..30).map(|i| (0.1 * i as f64).exp()).collect();
        let c = lcurve_corner(&res, &sol).unwrap();
        assert!(c.low_confidence);
        assert!(c.curvature.iter().all(|&k| k < 1e-6));
    }

    #[test]
    fn lcurve_rejects_short_logs() {
        assert!(lcurve_corner(&[1.0; 4], &[1.0; 4]).is_err());
        assert!(lcurve_corner(&[1.0, 0.5, 0.2, 0.0, 0.1], &[1.0; 5]).is_err());
    }
}
