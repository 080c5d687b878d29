//! Trusted and reconstruction masks from prescan magnitude images.
//!
//! The magnitude of the shortest echo is coil-combined, corrected for a
//! smooth multiplicative bias, and thresholded at the minimum of its
//! log-histogram. Morphology turns the threshold mask into the
//! reconstruction support.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::data::{MaskPair, PrescanData};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const HISTOGRAM_BINS: usize = 256;
pub const HISTOGRAM_SMOOTHING: usize = 5;

/// Root-sum-of-squares coil combination of one echo.
pub fn rss_combine(prescan: &PrescanData, echo: usize) -> Result<Vec<f64>> {
    if echo >= prescan.n_echoes() {
        return Err(Error::InvalidArgument(format!(
            "echo {echo} out of range ({} echoes)",
            prescan.n_echoes()
        )));
    }
    let l = prescan.grid.len();
    let mut out = vec![0.0; l];
    for c in 0..prescan.n_coils {
        for (o, v) in out.iter_mut().zip(prescan.image(echo, c)) {
            *o += v.norm_sqr();
        }
    }
    Ok(out.into_iter().map(f64::sqrt).collect())
}

/// Smooth, strictly positive multiplicative intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasField {
    pub values: Vec<f64>,
}

impl BiasField {
    pub fn correct(&self, mag: &[f64]) -> Vec<f64> {
        mag.iter().zip(&self.values).map(|(m, b)| m / b).collect()
    }
}

/// `mag > 0.1 * max(mag)`
pub fn default_rough_mask(mag: &[f64]) -> Vec<bool> {
    let max = mag.iter().copied().fold(0.0, f64::max);
    mag.iter().map(|&m| m > 0.1 * max).collect()
}

/// Exponents `(a, b, c)` of all monomials with `a + b + c <= degree`,
/// restricted to the axes that have more than one voxel.
fn monomials(grid: &Grid, degree: usize) -> Vec<[usize; 3]> {
    let lim = |axis: usize| if grid.dims[axis] > 1 { degree } else { 0 };
    let mut out = Vec::new();
    for a in 0..=lim(0) {
        for b in 0..=lim(1) {
            for c in 0..=lim(2) {
                if a + b + c <= degree {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Fits `exp(poly(r))` to `mag` over `rough_mask` in the log domain and
/// normalizes it to unit mean over the mask.
pub fn estimate_bias_field(mag: &[f64], rough_mask: &[bool], grid: &Grid, degree: usize) -> Result<BiasField> {
    if mag.len() != grid.len() || rough_mask.len() != grid.len() {
        return Err(Error::Dimension("magnitude and mask must match the grid".into()));
    }
    if mag.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::InvalidArgument("magnitude must be non-negative".into()));
    }
    let terms = monomials(grid, degree);
    let voxels: Vec<usize> = (0..grid.len())
        .filter(|&l| rough_mask[l] && mag[l] > 0.0)
        .collect();
    if voxels.is_empty() {
        return Err(Error::EmptyMask("rough mask for the bias fit".into()));
    }
    if voxels.len() < terms.len() {
        return Err(Error::DegenerateFit(format!(
            "{} mask voxels for {} polynomial coefficients",
            voxels.len(),
            terms.len()
        )));
    }
    // coordinates scaled to [-1, 1] per axis for conditioning
    let unit = |l: usize| -> [f64; 3] {
        let c = grid.coords_of(l);
        let mut u = [0.0; 3];
        for axis in 0..3 {
            let n = grid.dims[axis];
            if n > 1 {
                u[axis] = 2.0 * c[axis] as f64 / (n - 1) as f64 - 1.0;
            }
        }
        u
    };
    let eval_row = |l: usize| -> Vec<f64> {
        let u = unit(l);
        terms
            .iter()
            .map(|e| u[0].powi(e[0] as i32) * u[1].powi(e[1] as i32) * u[2].powi(e[2] as i32))
            .collect()
    };
    let design = DMatrix::from_fn(voxels.len(), terms.len(), |i, j| eval_row(voxels[i])[j]);
    let target = DVector::from_iterator(voxels.len(), voxels.iter().map(|&l| mag[l].ln()));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::DegenerateFit(
            "mask does not determine the polynomial coefficients".into(),
        ));
    }
    let coef = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::DegenerateFit(e.to_string()))?;

    let mut values: Vec<f64> = (0..grid.len())
        .map(|l| {
            let row = eval_row(l);
            row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>().exp()
        })
        .collect();
    let mask_count = rough_mask.iter().filter(|&&m| m).count();
    let mean = (0..grid.len())
        .filter(|&l| rough_mask[l])
        .map(|l| values[l])
        .sum::<f64>()
        / mask_count as f64;
    for v in &mut values {
        *v /= mean;
    }
    Ok(BiasField { values })
}

fn moving_average(h: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..h.len())
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half).min(h.len() - 1);
            h[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect()
}

/// Local maxima of `h`, with plateaus reported at their center.
fn local_maxima(h: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < h.len() {
        let mut j = i;
        while j + 1 < h.len() && h[j + 1] == h[i] {
            j += 1;
        }
        let left_lower = i == 0 || h[i - 1] < h[i];
        let right_lower = j == h.len() - 1 || h[j + 1] < h[j];
        if left_lower && right_lower && h[i] > 0.0 && !(i == 0 && j == h.len() - 1) {
            out.push((i + j) / 2);
        }
        i = j + 1;
    }
    out
}

/// Threshold at the global minimum of the smoothed log-magnitude histogram
/// between its two highest peaks. Returns the threshold in magnitude units.
pub fn trusted_threshold(mag_corrected: &[f64]) -> Result<f64> {
    let logs: Vec<f64> = mag_corrected
        .iter()
        .filter(|&&m| m > 0.0 && m.is_finite())
        .map(|m| m.ln())
        .collect();
    if logs.is_empty() {
        return Err(Error::EmptyMask("no positive magnitudes to threshold".into()));
    }
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * lo.abs().max(1.0)) {
        return Err(Error::UnimodalHistogram);
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for v in &logs {
        let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1.0;
    }
    let smooth = moving_average(&hist, HISTOGRAM_SMOOTHING);
    let mut peaks = local_maxima(&smooth);
    if peaks.len() < 2 {
        return Err(Error::UnimodalHistogram);
    }
    peaks.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));
    let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
    if b - a < 2 {
        return Err(Error::UnimodalHistogram);
    }
    let valley = (a + 1..b)
        .min_by(|&i, &j| smooth[i].total_cmp(&smooth[j]).then(i.cmp(&j)))
        .unwrap();
    Ok((lo + (valley as f64 + 0.5) * width).exp())
}

fn neighbour_offsets(grid: &Grid, full: bool) -> Vec<[isize; 3]> {
    let zr: &[isize] = if grid.dims[2] > 1 { &[-1, 0, 1] } else { &[0] };
    let mut out = Vec::new();
    for &dz in zr {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let nonzero = (dx != 0) as u8 + (dy != 0) as u8 + (dz != 0) as u8;
                if nonzero == 0 || (!full && nonzero > 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

fn shifted(grid: &Grid, l: usize, d: &[isize; 3]) -> Option<usize> {
    let c = grid.coords_of(l);
    let mut n = [0usize; 3];
    for axis in 0..3 {
        let v = c[axis] as isize + d[axis];
        if v < 0 || v >= grid.dims[axis] as isize {
            return None;
        }
        n[axis] = v as usize;
    }
    Some(grid.index(n[0], n[1], n[2]))
}

/// Connected-component labels (8-connectivity in 2D, 26 in 3D when `full`,
/// else 4/6). Returns labels (0 = background) and component sizes.
pub fn label_components(mask: &[bool], grid: &Grid, full: bool) -> (Vec<usize>, Vec<usize>) {
    let offsets = neighbour_offsets(grid, full);
    let mut labels = vec![0usize; mask.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len();
        sizes.push(0);
        labels[start] = label;
        queue.push_back(start);
        while let Some(l) = queue.pop_front() {
            sizes[label] += 1;
            for d in &offsets {
                if let Some(n) = shifted(grid, l, d) {
                    if mask[n] && labels[n] == 0 {
                        labels[n] = label;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Keeps the largest 8/26-connected component (lowest label on ties).
pub fn largest_component(mask: &[bool], grid: &Grid) -> Vec<bool> {
    let (labels, sizes) = label_components(mask, grid, true);
    let Some(best) = (1..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))) else {
        return vec![false; mask.len()];
    };
    labels.iter().map(|&lab| lab == best).collect()
}

/// Fills background regions (4/6-connected) that do not reach the border.
pub fn fill_holes(mask: &[bool], grid: &Grid) -> Vec<bool> {
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let (labels, sizes) = label_components(&background, grid, false);
    let mut touches_border = vec![false; sizes.len()];
    for l in 0..mask.len() {
        if labels[l] == 0 {
            continue;
        }
        let c = grid.coords_of(l);
        let on_border = (0..3).any(|a| grid.dims[a] > 1 && (c[a] == 0 || c[a] == grid.dims[a] - 1));
        if on_border {
            touches_border[labels[l]] = true;
        }
    }
    (0..mask.len())
        .map(|l| mask[l] || !touches_border[labels[l]])
        .collect()
}

/// Binary dilation with a discrete ball of `radius` voxels (a disc in 2D).
pub fn dilate(mask: &[bool], grid: &Grid, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let zr = if grid.dims[2] > 1 { r } else { 0 };
    let mut ball = Vec::new();
    for dz in -zr..=zr {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    ball.push([dx, dy, dz]);
                }
            }
        }
    }
    let mut out = mask.to_vec();
    for l in 0..mask.len() {
        if !mask[l] {
            continue;
        }
        for d in &ball {
            if let Some(n) = shifted(grid, l, d) {
                out[n] = true;
            }
        }
    }
    out
}

/// `M_T` is the thresholded magnitude restricted to its largest connected
/// component; `M_R` is that component with holes filled, dilated by
/// `dilation_radius`.
pub fn compute_masks(mag_corrected: &[f64], grid: &Grid, threshold: f64, dilation_radius: usize) -> Result<MaskPair> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    if mag_corrected.len() != grid.len() {
        return Err(Error::Dimension("magnitude does not match the grid".into()));
    }
    let above: Vec<bool> = mag_corrected.iter().map(|&m| m > threshold).collect();
    if !above.iter().any(|&m| m) {
        return Err(Error::EmptyMask("no voxel exceeds the trusted threshold".into()));
    }
    let trusted = largest_component(&above, grid);
    let recon = dilate(&fill_holes(&trusted, grid), grid, dilation_radius);
    MaskPair::new(trusted, recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn disc(grid: &Grid, cx: f64, cy: f64, r: f64) -> Vec<bool> {
        (0..grid.len())
            .map(|l| {
                let [x, y, _] = grid.coords_of(l);
                (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
            })
            .collect()
    }

    #[test]
    fn rss_three_four_five() {
        let g = Grid::new([1, 1, 1], [1.0; 3]).unwrap();
        let p = PrescanData::new(
            g,
            2,
            vec![0.0, 1e-3],
            vec![
                Complex64::new(3.0, 0.0),
                Complex64::new(0.0, 4.0),
                Complex64::new(1.0, 0.0),
                Complex64::new(1.0, 0.0),
            ],
        )
        .unwrap();
        assert_eq!(rss_combine(&p, 0).unwrap(), vec![5.0]);
        assert!(rss_combine(&p, 2).is_err());
    }

    #[test]
    fn rss_matches_voxel_loop() {
        use rand::Rng;
        let g = Grid::square_2d(8, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<Complex64> = (0..g.len() * 4 * 2)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let p = PrescanData::new(g, 4, vec![0.0, 1e-3], images).unwrap();
        let rss = rss_combine(&p, 1).unwrap();
        for l in 0..g.len() {
            let mut s = 0.0;
            for c in 0..4 {
                s += p.value(1, c, l).norm_sqr();
            }
            assert_eq!(rss[l], s.sqrt());
        }
        // single coil: plain magnitude
        let single = PrescanData::new(g, 1, vec![0.0, 1e-3], p.images[..2 * g.len()].to_vec()).unwrap();
        let rss = rss_combine(&single, 0).unwrap();
        for l in 0..g.len() {
            let m = single.value(0, 0, l).norm();
            assert!((rss[l] - m).abs() <= 1e-15 * m);
        }
    }

    #[test]
    fn constant_magnitude_has_unit_bias() {
        let g = Grid::square_2d(12, 0.2).unwrap();
        let mag = vec![7.5; g.len()];
        let bias = estimate_bias_field(&mag, &default_rough_mask(&mag), &g, 3).unwrap();
        for b in bias.values {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_ramp_is_removed() {
        let g = Grid::square_2d(16, 0.2).unwrap();
        let coords = g.coordinates();
        let mag: Vec<f64> = coords.iter().map(|r| 3.0 * (4.0 * r[0] - 2.0 * r[1]).exp()).collect();
        let mask = vec![true; g.len()];
        let bias = estimate_bias_field(&mag, &mask, &g, 1).unwrap();
        let corrected = bias.correct(&mag);
        let c0 = corrected[0];
        for c in &corrected {
            assert!(((c - c0) / c0).abs() < 1e-10);
        }
        let mean = bias.values.iter().sum::<f64>() / g.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_voxels_for_fit() {
        let g = Grid::square_2d(8, 0.2).unwrap();
        let mag = vec![1.0; g.len()];
        let mut mask = vec![false; g.len()];
        for m in mask.iter_mut().take(5) {
            *m = true;
        }
        // degree 3 in 2D has 10 coefficients
        assert!(matches!(
            estimate_bias_field(&mag, &mask, &g, 3),
            Err(Error::DegenerateFit(_))
        ));
    }

    fn bimodal(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let low = Normal::new(0.0, 0.1).unwrap();
        let high = Normal::new(100f64.ln(), 0.1).unwrap();
        let mut v = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let bright = i % 2 == 0;
            let x: f64 = if bright { high.sample(&mut rng) } else { low.sample(&mut rng) };
            v.push(x.exp());
            labels.push(bright);
        }
        (v, labels)
    }

    #[test]
    fn bimodal_threshold_separates_modes() {
        let (v, labels) = bimodal(20000, 7);
        let t = trusted_threshold(&v).unwrap();
        assert!(t > 1.0 && t < 100.0, "threshold {t}");
        let wrong = v.iter().zip(&labels).filter(|(&x, &b)| (x > t) != b).count();
        assert!((wrong as f64) < 0.01 * v.len() as f64);

        let scaled: Vec<f64> = v.iter().map(|x| x * 10.0).collect();
        let t10 = trusted_threshold(&scaled).unwrap();
        assert!((t10 / t - 10.0).abs() < 1e-9, "{t10} vs {t}");
    }

    #[test]
    fn constant_image_is_unimodal() {
        assert!(matches!(trusted_threshold(&[4.0; 100]), Err(Error::UnimodalHistogram)));
    }

    #[test]
    fn solid_disc_masks() {
        let g = Grid::square_2d(32, 0.2).unwrap();
        let d = disc(&g, 15.5, 15.5, 8.0);
        let mag: Vec<f64> = d.iter().map(|&b| if b { 10.0 } else { 0.5 }).collect();
        let m = compute_masks(&mag, &g, 2.0, 2).unwrap();
        assert_eq!(m.trusted, d);
        assert_eq!(m.recon, dilate(&d, &g, 2));
        assert!(m.recon.iter().filter(|&&b| b).count() > d.iter().filter(|&&b| b).count());
    }

    #[test]
    fn isolated_voxel_and_holes() {
        let g = Grid::square_2d(32, 0.2).unwrap();
        let outer = disc(&g, 15.5, 15.5, 9.0);
        let inner = disc(&g, 15.5, 15.5, 3.0);
        let mut mag: Vec<f64> = outer
            .iter()
            .zip(&inner)
            .map(|(&o, &i)| if o && !i { 10.0 } else { 0.0 })
            .collect();
        let stray = g.index(1, 30, 0);
        mag[stray] = 50.0;
        let m = compute_masks(&mag, &g, 1.0, 1).unwrap();
        assert!(!m.recon[stray]);
        assert!(!m.trusted[stray]);
        // hole filled
        assert!(m.recon[g.index(15, 15, 0)]);
        assert!(!m.trusted[g.index(15, 15, 0)]);
    }

    #[test]
    fn empty_trusted_mask() {
        let g = Grid::square_2d(8, 0.2).unwrap();
        assert!(matches!(
            compute_masks(&vec![0.1; g.len()], &g, 1.0, 2),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn recompute_on_own_output_is_idempotent() {
        let g = Grid::new([12, 10, 6], [0.2, 0.2, 0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mag: Vec<f64> = (0..g.len())
            .map(|l| {
                let [x, y, z] = g.coords_of(l);
                let r2 = (x as f64 - 6.0).powi(2) + (y as f64 - 5.0).powi(2) + 2.0 * (z as f64 - 3.0).powi(2);
                (if r2 < 14.0 { 10.0 } else { 0.0 }) + noise.sample(&mut rng)
            })
            .collect();
        let m = compute_masks(&mag, &g, 5.0, 1).unwrap();
        let binary: Vec<f64> = m.recon.iter().map(|&b| b as u8 as f64).collect();
        let again = compute_masks(&binary, &g, 0.5, 0).unwrap();
        assert_eq!(again.recon, m.recon);
        assert_eq!(again.trusted, m.recon);
    }
}
