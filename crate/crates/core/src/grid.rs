//! Voxel-grid geometry.
//!
//! Voxels are enumerated with x fastest: `l = x + nx * (y + ny * z)`. Every
//! module in the crate uses this order, and dataset files store grids in it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub fov_m: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], fov_m: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid extents must be >= 1, got {dims:?}"
            )));
        }
        if fov_m.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "field of view must be positive and finite, got {fov_m:?}"
            )));
        }
        Ok(Self { dims, fov_m })
    }

    /// Square 2D grid with isotropic pitch; the z extent equals one voxel pitch.
    pub fn square_2d(n: usize, fov_m: f64) -> Result<Self> {
        Self::new([n, n, 1], [fov_m, fov_m, fov_m / n as f64])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_2d(&self) -> bool {
        self.dims[2] == 1
    }

    /// Spatial dimensionality used for trajectories and hulls (2 or 3).
    pub fn spatial_dims(&self) -> usize {
        if self.is_2d() {
            2
        } else {
            3
        }
    }

    /// Voxel pitch in meters along each axis.
    pub fn pitch(&self) -> [f64; 3] {
        [
            self.fov_m[0] / self.dims[0] as f64,
            self.fov_m[1] / self.dims[1] as f64,
            self.fov_m[2] / self.dims[2] as f64,
        ]
    }

    /// Smallest pitch over the axes that have more than one voxel.
    pub fn min_active_pitch(&self) -> f64 {
        let p = self.pitch();
        let active = (0..3)
            .filter(|&a| self.dims[a] > 1)
            .map(|a| p[a])
            .fold(f64::INFINITY, f64::min);
        if active.is_finite() {
            active
        } else {
            p[0]
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords_of(&self, l: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [l % nx, (l / nx) % ny, l / (nx * ny)]
    }

    /// Centered coordinate of index `m` along `axis`, in meters.
    #[inline]
    pub fn axis_coordinate(&self, axis: usize, m: usize) -> f64 {
        let n = self.dims[axis] as f64;
        self.pitch()[axis] * (m as f64 - (n - 1.0) / 2.0)
    }

    /// Voxel-center positions `r_l` in meters, one row per voxel.
    pub fn coordinates(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|l| {
                let [x, y, z] = self.coords_of(l);
                [
                    self.axis_coordinate(0, x),
                    self.axis_coordinate(1, y),
                    self.axis_coordinate(2, z),
                ]
            })
            .collect()
    }

    /// Neighbour of `l` displaced by `delta` along `axis`, if it stays inside the grid.
    #[inline]
    pub fn offset(&self, l: usize, axis: usize, delta: isize) -> Option<usize> {
        let mut c = self.coords_of(l);
        let v = c[axis] as isize + delta;
        if v < 0 || v >= self.dims[axis] as isize {
            return None;
        }
        c[axis] = v as usize;
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Number of voxels in a single z-plane.
    pub fn plane_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }
}
