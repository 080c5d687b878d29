//! Matrix-free encoding operator `E p = P (S ∘ (p 1ᵀ))` and its adjoint.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::kernels::{adjoint_accumulate, forward, phase_block, reverse_weight, weight, PhaseBlock};
use crate::data::{ElementOrder, SpatialBasis, TemporalBasis};
use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Where blocks of `K` are read from.
#[derive(Clone, Debug)]
enum TemporalRows {
    /// `Kᵀ`, column-major: the columns of `Kᵀ` for a sample range are one
    /// contiguous slice.
    Transposed(DMatrix<f64>),
    /// `K` in row-major order, indexed by rows directly.
    RowMajor(Vec<f64>),
}

impl TemporalRows {
    fn new(k: &TemporalBasis, order: ElementOrder) -> Self {
        match order {
            ElementOrder::ColumnMajor => TemporalRows::Transposed(k.matrix.transpose()),
            ElementOrder::RowMajor => {
                let m = &k.matrix;
                let mut rows = Vec::with_capacity(m.len());
                for i in 0..m.nrows() {
                    rows.extend(m.row(i).iter());
                }
                TemporalRows::RowMajor(rows)
            }
        }
    }

    fn rows(&self, start: usize, end: usize, terms: usize) -> &[f64] {
        match self {
            TemporalRows::Transposed(kt) => &kt.as_slice()[start * terms..end * terms],
            TemporalRows::RowMajor(rows) => &rows[start * terms..end * terms],
        }
    }
}

/// How the phase matrix is held.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// `P` computed once and kept in memory.
    Full,
    /// Blocks of `P` recomputed on use. `starts` holds the 0-based first
    /// sample of every block followed by `K`.
    Split { starts: Vec<usize> },
}

/// Block starts for blocks of `rows` samples: `[0, rows, 2 rows, ..., K]`.
pub fn uniform_block_starts(n_samples: usize, rows: usize) -> Result<Vec<usize>> {
    if rows == 0 {
        return Err(Error::InvalidBlocks("block size must be at least one sample".into()));
    }
    let mut starts: Vec<usize> = (0..n_samples).step_by(rows).collect();
    starts.push(n_samples);
    Ok(starts)
}

/// `count` nearly equal blocks.
pub fn even_block_starts(n_samples: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > n_samples {
        return Err(Error::InvalidBlocks(format!(
            "cannot split {n_samples} samples into {count} blocks"
        )));
    }
    Ok((0..=count).map(|b| b * n_samples / count).collect())
}

/// Checks that `starts` begins at 0, ends at `K` and is strictly increasing.
pub fn validate_block_starts(starts: &[usize], n_samples: usize) -> Result<()> {
    if starts.len() < 2 {
        return Err(Error::InvalidBlocks("need at least one block".into()));
    }
    if starts[0] != 0 {
        return Err(Error::InvalidBlocks(format!("first block starts at {}, not 0", starts[0])));
    }
    if *starts.last().unwrap() != n_samples {
        return Err(Error::InvalidBlocks(format!(
            "blocks end at {}, but there are {n_samples} samples",
            starts.last().unwrap()
        )));
    }
    if starts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidBlocks("block starts must be strictly increasing".into()));
    }
    Ok(())
}

/// Encoding operator over the reconstruction voxels.
#[derive(Clone, Debug)]
pub struct EncodingOperator {
    spatial: DMatrix<f64>,
    temporal: TemporalRows,
    /// `L x Γ`, row-major
    sens: Vec<Complex64>,
    terms: usize,
    n_samples: usize,
    n_voxels: usize,
    gamma: usize,
    full: Option<PhaseBlock>,
    starts: Vec<usize>,
}

impl EncodingOperator {
    /// `sens` is `L x Γ` over the same voxels as the columns of `spatial`.
    pub fn new(
        spatial: &SpatialBasis,
        temporal: &TemporalBasis,
        sens: &DMatrix<Complex64>,
        order: ElementOrder,
        variant: Variant,
    ) -> Result<Self> {
        let terms = temporal.matrix.ncols();
        if spatial.matrix.nrows() != terms {
            return Err(Error::Dimension(format!(
                "temporal basis has {terms} columns, spatial basis has {} rows",
                spatial.matrix.nrows()
            )));
        }
        let n_voxels = spatial.matrix.ncols();
        if sens.nrows() != n_voxels {
            return Err(Error::Dimension(format!(
                "sensitivities cover {} voxels, spatial basis {n_voxels}",
                sens.nrows()
            )));
        }
        let gamma = sens.ncols();
        if gamma == 0 {
            return Err(Error::Dimension("at least one coil is required".into()));
        }
        let mut row_major = Vec::with_capacity(sens.len());
        for l in 0..n_voxels {
            row_major.extend(sens.row(l).iter());
        }
        let n_samples = temporal.n_samples();
        let temporal = TemporalRows::new(temporal, order);
        let mut op = Self {
            spatial: spatial.matrix.clone(),
            temporal,
            sens: row_major,
            terms,
            n_samples,
            n_voxels,
            gamma,
            full: None,
            starts: vec![0, n_samples],
        };
        match variant {
            Variant::Full => op.full = Some(op.block(0, n_samples)),
            Variant::Split { starts } => {
                validate_block_starts(&starts, n_samples)?;
                op.starts = starts;
            }
        }
        Ok(op)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_coils(&self) -> usize {
        self.gamma
    }

    pub fn is_full(&self) -> bool {
        self.full.is_some()
    }

    /// Phase block for samples `start..end`.
    pub fn block(&self, start: usize, end: usize) -> PhaseBlock {
        phase_block(
            self.temporal.rows(start, end, self.terms),
            self.spatial.as_slice(),
            self.terms,
        )
    }

    /// Runs `f(start, block)` over the held phase matrix or over freshly
    /// computed blocks.
    fn for_each_block(&self, mut f: impl FnMut(usize, &PhaseBlock)) {
        if let Some(p) = &self.full {
            f(0, p);
            return;
        }
        for w in self.starts.windows(2) {
            let b = self.block(w[0], w[1]);
            f(w[0], &b);
        }
    }

    fn check_image(&self, x: &[Complex64]) -> Result<()> {
        if x.len() != self.n_voxels {
            return Err(Error::Dimension(format!(
                "image has {} voxels, operator {}",
                x.len(),
                self.n_voxels
            )));
        }
        Ok(())
    }

    /// `E x` as a `K x Γ` matrix.
    pub fn apply_e(&self, x: &[Complex64]) -> Result<DMatrix<Complex64>> {
        self.check_image(x)?;
        let q = weight(&self.sens, x, self.gamma);
        let mut y = vec![ZERO; self.n_samples * self.gamma];
        self.for_each_block(|start, b| {
            let out = &mut y[start * self.gamma..(start + b.rows) * self.gamma];
            forward(b, &q, self.gamma, out);
        });
        Ok(DMatrix::from_row_slice(self.n_samples, self.gamma, &y))
    }

    /// `E^H σ` for a `K x Γ` matrix of samples.
    pub fn apply_eh(&self, sigma: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
        if sigma.nrows() != self.n_samples || sigma.ncols() != self.gamma {
            return Err(Error::Dimension(format!(
                "samples are {}x{}, operator expects {}x{}",
                sigma.nrows(),
                sigma.ncols(),
                self.n_samples,
                self.gamma
            )));
        }
        let mut rows = Vec::with_capacity(sigma.len());
        for k in 0..self.n_samples {
            rows.extend(sigma.row(k).iter());
        }
        let mut acc = vec![ZERO; self.n_voxels * self.gamma];
        self.for_each_block(|start, b| {
            adjoint_accumulate(b, &rows[start * self.gamma..(start + b.rows) * self.gamma], self.gamma, &mut acc);
        });
        Ok(reverse_weight(&acc, &self.sens, self.gamma))
    }

    /// `E^H E x`. Each phase block is used for the forward product and the
    /// adjoint accumulation before the next one is formed.
    pub fn apply_normal(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_image(x)?;
        let q = weight(&self.sens, x, self.gamma);
        let mut acc = vec![ZERO; self.n_voxels * self.gamma];
        let mut y = Vec::new();
        self.for_each_block(|_, b| {
            y.resize(b.rows * self.gamma, ZERO);
            forward(b, &q, self.gamma, &mut y);
            adjoint_accumulate(b, &y, self.gamma, &mut acc);
        });
        Ok(reverse_weight(&acc, &self.sens, self.gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_start_validation() {
        assert!(validate_block_starts(&[0, 3, 10], 10).is_ok());
        assert!(validate_block_starts(&[0, 3, 9], 10).is_err());
        assert!(validate_block_starts(&[1, 3, 10], 10).is_err());
        assert!(validate_block_starts(&[0, 3, 3, 10], 10).is_err());
        assert!(validate_block_starts(&[0], 0).is_err());
        assert_eq!(uniform_block_starts(10, 4).unwrap(), vec![0, 4, 8, 10]);
        assert_eq!(even_block_starts(10, 3).unwrap(), vec![0, 3, 6, 10]);
        assert!(even_block_starts(3, 4).is_err());
    }

    fn one_voxel(k: usize) -> EncodingOperator {
        let spatial = SpatialBasis::new(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let t = DMatrix::from_fn(k, 1, |i, _| i as f64);
        let temporal = TemporalBasis::new(t).unwrap();
        let sens = DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        EncodingOperator::new(&spatial, &temporal, &sens, ElementOrder::ColumnMajor, Variant::Full).unwrap()
    }

    #[test]
    fn single_voxel_dc() {
        let op = one_voxel(5);
        let c = Complex64::new(2.0, -1.0);
        let y = op.apply_e(&[c]).unwrap();
        assert!(y.iter().all(|v| *v == c));
        let p = op.apply_eh(&op.apply_e(&[Complex64::new(1.0, 0.0)]).unwrap()).unwrap();
        assert_eq!(p[0], Complex64::new(5.0, 0.0));
        let zero = op.apply_eh(&DMatrix::from_element(5, 1, ZERO)).unwrap();
        assert_eq!(zero[0], ZERO);
        assert!(op.apply_e(&[ZERO]).unwrap().iter().all(|v| *v == ZERO));
    }
}
