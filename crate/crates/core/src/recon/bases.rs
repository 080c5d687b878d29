//! Spatial and temporal bases of the phase model `φ = K R`.

use nalgebra::DMatrix;

use crate::data::{SpatialBasis, TemporalBasis};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// One solid-harmonic term and the order it belongs to.
struct Harmonic {
    order: u8,
    /// identically zero in the `z = 0` plane
    needs_z: bool,
    eval: fn(f64, f64, f64) -> f64,
}

const HARMONICS: [Harmonic; 15] = [
    Harmonic { order: 1, needs_z: false, eval: |x, _, _| x },
    Harmonic { order: 1, needs_z: false, eval: |_, y, _| y },
    Harmonic { order: 1, needs_z: true, eval: |_, _, z| z },
    Harmonic { order: 2, needs_z: false, eval: |x, y, _| x * y },
    Harmonic { order: 2, needs_z: true, eval: |_, y, z| z * y },
    Harmonic { order: 2, needs_z: false, eval: |x, y, z| 2.0 * z * z - x * x - y * y },
    Harmonic { order: 2, needs_z: true, eval: |x, _, z| z * x },
    Harmonic { order: 2, needs_z: false, eval: |x, y, _| x * x - y * y },
    Harmonic { order: 3, needs_z: false, eval: |x, y, _| 3.0 * y * x * x - y * y * y },
    Harmonic { order: 3, needs_z: true, eval: |x, y, z| x * y * z },
    Harmonic { order: 3, needs_z: false, eval: |x, y, z| y * (4.0 * z * z - x * x - y * y) },
    Harmonic { order: 3, needs_z: true, eval: |x, y, z| 2.0 * z * z * z - 3.0 * z * (x * x + y * y) },
    Harmonic { order: 3, needs_z: false, eval: |x, y, z| x * (4.0 * z * z - x * x - y * y) },
    Harmonic { order: 3, needs_z: true, eval: |x, y, z| z * (x * x - y * y) },
    Harmonic { order: 3, needs_z: false, eval: |x, y, _| x * x * x - 3.0 * x * y * y },
];

fn selected(order: u8, spatial_dims: usize) -> Result<Vec<&'static Harmonic>> {
    if !(1..=3).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "solid-harmonic order must be 1, 2 or 3, got {order}"
        )));
    }
    if !(2..=3).contains(&spatial_dims) {
        return Err(Error::InvalidArgument(format!(
            "spatial dimensionality must be 2 or 3, got {spatial_dims}"
        )));
    }
    Ok(HARMONICS
        .iter()
        .filter(|h| h.order <= order && (spatial_dims == 3 || !h.needs_z))
        .collect())
}

/// Number of basis terms for `order`. In 2D the terms that vanish in the
/// `z = 0` plane are dropped: 2, 5 and 9 terms for orders 1..3 (3, 8 and 15
/// in 3D). `constant` adds the global term `h_0 = 1` in front.
pub fn harmonic_count(order: u8, spatial_dims: usize, constant: bool) -> Result<usize> {
    Ok(selected(order, spatial_dims)?.len() + constant as usize)
}

/// Real solid harmonics evaluated at `coords` (meters), one row per term:
/// `[1]`, then `x, y, z`, then `xy, zy, 2z²-x²-y², zx, x²-y²`, then
/// `3yx²-y³, xyz, y(4z²-x²-y²), 2z³-3z(x²+y²), x(4z²-x²-y²), z(x²-y²), x³-3xy²`.
pub fn solid_harmonics(order: u8, coords: &[[f64; 3]], spatial_dims: usize, constant: bool) -> Result<DMatrix<f64>> {
    let terms = selected(order, spatial_dims)?;
    let offset = constant as usize;
    let mut out = DMatrix::zeros(terms.len() + offset, coords.len());
    for (l, r) in coords.iter().enumerate() {
        if constant {
            out[(0, l)] = 1.0;
        }
        for (i, h) in terms.iter().enumerate() {
            out[(i + offset, l)] = (h.eval)(r[0], r[1], r[2]);
        }
    }
    Ok(out)
}

/// Spatial basis over the reconstruction voxels: row 0 is B0 (rad/s), the
/// remaining rows are solid harmonics at the voxel centers. The temporal
/// basis must carry one field term per harmonic.
pub fn build_bases(
    b0: &[f64],
    voxels: &[usize],
    grid: &Grid,
    temporal: &TemporalBasis,
    order: u8,
    constant: bool,
) -> Result<SpatialBasis> {
    if b0.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "B0 map has {} voxels, grid has {}",
            b0.len(),
            grid.len()
        )));
    }
    let d = grid.spatial_dims();
    let count = harmonic_count(order, d, constant)?;
    if temporal.n_terms() != count {
        return Err(Error::Dimension(format!(
            "order {order} in {d}D needs {count} field terms, trajectory has {}",
            temporal.n_terms()
        )));
    }
    let all = grid.coordinates();
    let coords: Vec<[f64; 3]> = voxels.iter().map(|&l| all[l]).collect();
    let h = solid_harmonics(order, &coords, d, constant)?;
    let mut r = DMatrix::zeros(count + 1, voxels.len());
    for (c, &l) in voxels.iter().enumerate() {
        r[(0, c)] = b0[l];
        for p in 0..count {
            r[(p + 1, c)] = h[(p, c)];
        }
    }
    SpatialBasis::new(r)
}

/// Flips the sign of the whole phase model. Data acquired with the
/// `exp(-i k·r)` convention are reconstructed by negating `K R`; the spatial
/// basis is negated instead of `K` so that sample times stay increasing.
pub fn conjugate_phase(spatial: &SpatialBasis) -> SpatialBasis {
    SpatialBasis {
        matrix: -&spatial.matrix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(harmonic_count(1, 3, false).unwrap(), 3);
        assert_eq!(harmonic_count(2, 3, false).unwrap(), 8);
        assert_eq!(harmonic_count(3, 3, false).unwrap(), 15);
        assert_eq!(harmonic_count(1, 2, false).unwrap(), 2);
        assert_eq!(harmonic_count(3, 2, true).unwrap(), 10);
        assert!(harmonic_count(4, 3, false).is_err());
    }

    #[test]
    fn first_order_is_identity() {
        let h = solid_harmonics(1, &[[1.0, 2.0, 3.0]], 3, false).unwrap();
        assert_eq!(h.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn origin_values_vanish() {
        let h = solid_harmonics(3, &[[0.0; 3]], 3, true).unwrap();
        assert_eq!(h[(0, 0)], 1.0);
        assert!(h.iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn harmonics_are_harmonic() {
        let step = 1e-3;
        for r in [[0.03, -0.02, 0.05], [-0.1, 0.07, 0.01], [0.2, 0.2, -0.15]] {
            let mut pts = vec![r];
            for axis in 0..3 {
                for s in [-1.0, 1.0] {
                    let mut p = r;
                    p[axis] += s * step;
                    pts.push(p);
                }
            }
            let h = solid_harmonics(3, &pts, 3, false).unwrap();
            for t in 0..h.nrows() {
                let lap = (1..7).map(|i| h[(t, i)]).sum::<f64>() - 6.0 * h[(t, 0)];
                assert!((lap / (step * step)).abs() < 1e-6, "term {t}: {}", lap / (step * step));
            }
        }
    }

    #[test]
    fn first_order_2d_layout() {
        let g = Grid::square_2d(4, 0.2).unwrap();
        let t = TemporalBasis::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0])).unwrap();
        let b0: Vec<f64> = (0..16).map(|l| l as f64).collect();
        let voxels = vec![0, 5, 15];
        let r = build_bases(&b0, &voxels, &g, &t, 1, false).unwrap();
        let coords = g.coordinates();
        for (c, &l) in voxels.iter().enumerate() {
            assert_eq!(r.matrix[(0, c)], b0[l]);
            assert_eq!(r.matrix[(1, c)], coords[l][0]);
            assert_eq!(r.matrix[(2, c)], coords[l][1]);
        }
        let bad = TemporalBasis::new(DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 2.0, 3.0])).unwrap();
        assert!(build_bases(&b0, &voxels, &g, &bad, 1, false).is_err());
    }
}
