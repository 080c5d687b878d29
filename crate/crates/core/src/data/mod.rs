//! Domain types shared by every stage of the reconstruction workflow.
//!
//! Matrices follow the column-major convention of `nalgebra` (first index
//! fastest). Grid-shaped quantities are flat vectors in the x-fastest voxel
//! order defined by [`Grid`](crate::grid::Grid).

pub mod io;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use io::{ArrayEntry, Dataset, DatasetManifest, Dtype, ElementOrder, MANIFEST_VERSION};

pub(crate) fn all_finite_real(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn all_finite_complex(v: &[Complex64]) -> bool {
    v.iter().all(|x| x.re.is_finite() && x.im.is_finite())
}

/// Acquired k-space samples: `K x Γ`, one column per receiver coil.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCoilData {
    pub samples: DMatrix<Complex64>,
}

impl RawCoilData {
    pub fn new(samples: DMatrix<Complex64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::Dimension("raw data needs K >= 1 and >= 1 coil".into()));
        }
        if !all_finite_complex(samples.as_slice()) {
            return Err(Error::NonFinite("sigma".into()));
        }
        Ok(Self { samples })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_coils(&self) -> usize {
        self.samples.ncols()
    }
}

/// `K x (P+1)` temporal basis. Column 0 holds sample times in seconds, the
/// remaining columns the dynamic field coefficients `k_p(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBasis {
    pub matrix: DMatrix<f64>,
}

impl TemporalBasis {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Dimension("temporal basis must be non-empty".into()));
        }
        if !all_finite_real(matrix.as_slice()) {
            return Err(Error::NonFinite("ktemporal".into()));
        }
        let t = matrix.column(0);
        if t.iter().zip(t.iter().skip(1)).any(|(a, b)| b < a) {
            return Err(Error::InvalidArgument(
                "sample times must be non-decreasing".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of dynamic field terms `P` (excluding the time column).
    pub fn n_terms(&self) -> usize {
        self.matrix.ncols() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        self.matrix.column(0).iter().copied().collect()
    }

    /// Sample coordinates formed by the first `d` field terms (the linear
    /// gradient terms for a solid-harmonic basis), one row per sample.
    pub fn linear_terms(&self, d: usize) -> Result<Vec<Vec<f64>>> {
        if self.n_terms() < d {
            return Err(Error::Dimension(format!(
                "trajectory has {} field terms, need at least {d} linear terms",
                self.n_terms()
            )));
        }
        Ok((0..self.n_samples())
            .map(|k| (1..=d).map(|c| self.matrix[(k, c)]).collect())
            .collect())
    }
}

/// `(P+1) x L` spatial basis: row 0 is B0 in rad/s, the others are spatial
/// basis functions evaluated at voxel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBasis {
    pub matrix: DMatrix<f64>,
}

impl SpatialBasis {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !all_finite_real(matrix.as_slice()) {
            return Err(Error::NonFinite("spatial basis".into()));
        }
        Ok(Self { matrix })
    }

    pub fn n_voxels(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Coil sensitivities, `L x Γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    pub maps: DMatrix<Complex64>,
}

impl SensitivityMaps {
    pub fn new(maps: DMatrix<Complex64>) -> Result<Self> {
        if !all_finite_complex(maps.as_slice()) {
            return Err(Error::NonFinite("sens".into()));
        }
        Ok(Self { maps })
    }

    /// Sensitivities with every voxel outside `recon` forced to zero.
    pub fn masked(mut maps: DMatrix<Complex64>, recon: &[bool]) -> Result<Self> {
        if maps.nrows() != recon.len() {
            return Err(Error::Dimension(format!(
                "sensitivity rows {} vs mask length {}",
                maps.nrows(),
                recon.len()
            )));
        }
        for c in 0..maps.ncols() {
            for (l, &inside) in recon.iter().enumerate() {
                if !inside {
                    maps[(l, c)] = Complex64::new(0.0, 0.0);
                }
            }
        }
        Self::new(maps)
    }

    pub fn n_voxels(&self) -> usize {
        self.maps.nrows()
    }

    pub fn n_coils(&self) -> usize {
        self.maps.ncols()
    }

    /// Keeps only the listed voxel rows, in order.
    pub fn restrict(&self, voxels: &[usize]) -> DMatrix<Complex64> {
        DMatrix::from_fn(voxels.len(), self.n_coils(), |i, c| {
            self.maps[(voxels[i], c)]
        })
    }
}

/// Trusted (`M_T`) and reconstruction (`M_R`) masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub trusted: Vec<bool>,
    pub recon: Vec<bool>,
}

impl MaskPair {
    pub fn new(trusted: Vec<bool>, recon: Vec<bool>) -> Result<Self> {
        if trusted.len() != recon.len() {
            return Err(Error::Dimension("mask lengths differ".into()));
        }
        if trusted.iter().zip(&recon).any(|(&t, &r)| t && !r) {
            return Err(Error::InvalidArgument(
                "trusted mask must be contained in the reconstruction mask".into(),
            ));
        }
        if !recon.iter().any(|&r| r) {
            return Err(Error::EmptyMask("reconstruction mask".into()));
        }
        Ok(Self { trusted, recon })
    }

    pub fn recon_indices(&self) -> Vec<usize> {
        mask_indices(&self.recon)
    }
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(l, &m)| m.then_some(l))
        .collect()
}

/// Off-resonance estimate with per-voxel fit diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    /// rad/s
    pub b0: Vec<f64>,
    /// even/odd echo phase offset, rad
    pub beta: Vec<f64>,
    /// root-mean-square fit residual, rad
    pub stderr: Vec<f64>,
}

impl FieldMap {
    pub fn new(b0: Vec<f64>, beta: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        if b0.len() != beta.len() || b0.len() != stderr.len() {
            return Err(Error::Dimension("field map components differ in length".into()));
        }
        if stderr.iter().any(|&e| e < 0.0 || e.is_nan()) {
            return Err(Error::InvalidArgument(
                "standard error must be non-negative".into(),
            ));
        }
        Ok(Self { b0, beta, stderr })
    }
}

/// Reconstructed image on the full grid, plus CG bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconImage {
    pub values: Vec<Complex64>,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub final_solution_norm: f64,
}

impl ReconImage {
    pub fn from_values(values: Vec<Complex64>) -> Self {
        Self {
            values,
            iterations: 0,
            final_residual_norm: 0.0,
            final_solution_norm: 0.0,
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }
}

/// Filter on the centered Cartesian k-space grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceFilter {
    pub mask: Vec<f64>,
}

impl KSpaceFilter {
    pub fn new(mask: Vec<f64>) -> Result<Self> {
        if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "k-space filter values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { mask })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            mask: vec![1.0; len],
        }
    }
}

/// Multi-echo, multi-coil prescan images.
///
/// `images` is laid out voxel-fastest, then coil, then echo:
/// `images[l + L * (c + Γ * n)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrescanData {
    pub grid: Grid,
    pub n_coils: usize,
    pub te_s: Vec<f64>,
    pub images: Vec<Complex64>,
}

impl PrescanData {
    pub fn new(grid: Grid, n_coils: usize, te_s: Vec<f64>, images: Vec<Complex64>) -> Result<Self> {
        if te_s.len() < 2 {
            return Err(Error::InvalidArgument("prescan needs at least two echoes".into()));
        }
        if te_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "echo times must be strictly increasing".into(),
            ));
        }
        if n_coils == 0 || images.len() != grid.len() * n_coils * te_s.len() {
            return Err(Error::Dimension(format!(
                "prescan holds {} values, expected {} x {} x {}",
                images.len(),
                grid.len(),
                n_coils,
                te_s.len()
            )));
        }
        if !all_finite_complex(&images) {
            return Err(Error::NonFinite("prescan".into()));
        }
        Ok(Self {
            grid,
            n_coils,
            te_s,
            images,
        })
    }

    pub fn n_echoes(&self) -> usize {
        self.te_s.len()
    }

    /// Mean echo spacing.
    pub fn echo_spacing(&self) -> f64 {
        let n = self.te_s.len();
        (self.te_s[n - 1] - self.te_s[0]) / (n - 1) as f64
    }

    #[inline]
    pub fn value(&self, echo: usize, coil: usize, voxel: usize) -> Complex64 {
        let l = self.grid.len();
        self.images[voxel + l * (coil + self.n_coils * echo)]
    }

    pub fn image(&self, echo: usize, coil: usize) -> &[Complex64] {
        let l = self.grid.len();
        let start = l * (coil + self.n_coils * echo);
        &self.images[start..start + l]
    }
}
