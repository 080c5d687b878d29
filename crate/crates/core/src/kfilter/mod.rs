//! k-space filter: Cartesian FFT-grid points inside the convex hull of the
//! sampled first-order k-space coordinates.

pub mod hull;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftDirection;

use crate::data::KSpaceFilter;
use crate::error::{Error, Result};
use crate::fft::{centered_index, fft_nd};
use crate::grid::Grid;

/// Relative tolerance for counting grid points on the hull boundary as inside.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Centered k-space coordinates `Δk (m - n/2)` along `axis`, in rad/m.
pub fn kspace_axis(grid: &Grid, axis: usize) -> Vec<f64> {
    let n = grid.dims[axis];
    let dk = 2.0 * std::f64::consts::PI / grid.fov_m[axis];
    (0..n).map(|m| dk * (m as f64 - (n / 2) as f64)).collect()
}

/// k-space coordinate of filter element `l`.
pub fn kspace_point(grid: &Grid, l: usize) -> [f64; 3] {
    let c = grid.coords_of(l);
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let n = grid.dims[axis];
        let dk = 2.0 * std::f64::consts::PI / grid.fov_m[axis];
        out[axis] = dk * (c[axis] as f64 - (n / 2) as f64);
    }
    out
}

/// Builds the binary hull filter. `k_coords` holds one row per sample with
/// as many columns as the grid has spatial dimensions.
pub fn build_filter(k_coords: &[Vec<f64>], grid: &Grid) -> Result<KSpaceFilter> {
    let d = grid.spatial_dims();
    if k_coords.iter().any(|k| k.len() != d) {
        return Err(Error::Dimension(format!(
            "k-space coordinates must have {d} components for this grid"
        )));
    }
    let mask: Vec<f64> = if d == 2 {
        let pts: Vec<[f64; 2]> = k_coords.iter().map(|k| [k[0], k[1]]).collect();
        let hull = hull::hull_2d(&pts)?;
        let tol = BOUNDARY_TOLERANCE * hull.scale;
        (0..grid.len())
            .into_par_iter()
            .map(|l| {
                let k = kspace_point(grid, l);
                hull.contains(&[k[0], k[1]], tol) as u8 as f64
            })
            .collect()
    } else {
        let pts: Vec<[f64; 3]> = reduce_planes(k_coords);
        let hull = hull::hull_3d(&pts)?;
        let tol = BOUNDARY_TOLERANCE * hull.scale;
        (0..grid.len())
            .into_par_iter()
            .map(|l| hull.contains(&kspace_point(grid, l), tol) as u8 as f64)
            .collect()
    };
    KSpaceFilter::new(mask)
}

/// Replaces the points of each exactly-planar `k_z` group by that group's
/// 2D hull vertices. Interior points never change a convex hull, so the
/// result is the same set with far fewer points for stacked trajectories.
fn reduce_planes(k_coords: &[Vec<f64>]) -> Vec<[f64; 3]> {
    let mut by_z: std::collections::BTreeMap<u64, Vec<[f64; 2]>> = Default::default();
    for k in k_coords {
        by_z.entry(k[2].to_bits()).or_default().push([k[0], k[1]]);
    }
    let mut out = Vec::new();
    for (z, pts) in by_z {
        let z = f64::from_bits(z);
        for v in hull::hull_vertices_2d(&pts) {
            out.push([v[0], v[1], z]);
        }
    }
    out
}

/// Builds the filter plane by plane for stack-of-2D acquisitions: samples
/// are assigned to the nearest Cartesian `k_z` plane and each plane gets
/// the 2D hull of its own samples. Planes without a proper hull stay zero.
pub fn build_filter_per_slice(k_coords: &[Vec<f64>], grid: &Grid) -> Result<KSpaceFilter> {
    if k_coords.iter().any(|k| k.len() != 3) {
        return Err(Error::Dimension("per-slice filters need 3 k-space components".into()));
    }
    let kz = kspace_axis(grid, 2);
    let dkz = 2.0 * std::f64::consts::PI / grid.fov_m[2];
    let nz = grid.dims[2];
    let mut planes: Vec<Vec<[f64; 2]>> = vec![Vec::new(); nz];
    for k in k_coords {
        let m = (k[2] / dkz + (nz / 2) as f64).round();
        if m >= 0.0 && (m as usize) < nz {
            planes[m as usize].push([k[0], k[1]]);
        }
    }
    debug_assert_eq!(kz.len(), nz);
    let plane_len = grid.plane_len();
    let mut mask = vec![0.0; grid.len()];
    let mut any = false;
    for (z, pts) in planes.iter().enumerate() {
        let hull = match hull::hull_2d(pts) {
            Ok(h) => h,
            Err(Error::DegenerateHull) => continue,
            Err(e) => return Err(e),
        };
        any = true;
        let tol = BOUNDARY_TOLERANCE * hull.scale;
        for i in 0..plane_len {
            let l = z * plane_len + i;
            let k = kspace_point(grid, l);
            if hull.contains(&[k[0], k[1]], tol) {
                mask[l] = 1.0;
            }
        }
    }
    if !any {
        return Err(Error::DegenerateHull);
    }
    KSpaceFilter::new(mask)
}

/// Binary dilation of the filter support by `radius` grid points (ball).
pub fn dilate_filter(filter: &KSpaceFilter, grid: &Grid, radius: usize) -> KSpaceFilter {
    let support: Vec<bool> = filter.mask.iter().map(|&v| v > 0.0).collect();
    let grown = crate::masks::dilate(&support, grid, radius);
    KSpaceFilter {
        mask: grown
            .iter()
            .zip(&filter.mask)
            .map(|(&g, &v)| if g { v.max(1.0) } else { 0.0 })
            .collect(),
    }
}

/// `IFFT(FFT(ρ) ∘ f)` with the k-space grid centered as in [`kspace_axis`].
///
/// The transform into k-space uses the same `exp(+i k·r)` sign as the
/// encoding model, so filter element `k` acts on the signal component the
/// trajectory sampled at `k`.
pub fn apply_filter(values: &[Complex64], grid: &Grid, filter: &KSpaceFilter) -> Result<Vec<Complex64>> {
    if values.len() != grid.len() || filter.mask.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "image ({}) and filter ({}) must both match the grid ({})",
            values.len(),
            filter.mask.len(),
            grid.len()
        )));
    }
    let mut k = values.to_vec();
    fft_nd(&mut k, grid.dims, FftDirection::Inverse);
    let [nx, ny, nz] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let f = filter.mask[grid.index(
                    centered_index(x, nx),
                    centered_index(y, ny),
                    centered_index(z, nz),
                )];
                k[grid.index(x, y, z)] *= f;
            }
        }
    }
    fft_nd(&mut k, grid.dims, FftDirection::Forward);
    let scale = 1.0 / grid.len() as f64;
    Ok(k.into_iter().map(|v| v * scale).collect())
}
