//! Sparse SPD machinery for the map-smoothing problems: CSR matrices,
//! finite-difference stencils, normal-equation assembly of stacked
//! least-squares systems, and preconditioned conjugate gradients.

use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in the order they appear; entries that sum to exactly zero are
    /// kept so the sparsity pattern is structural.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        // stable, so duplicate sums happen in insertion order
        order.sort_by_key(|&t| (triplets[t].0, triplets[t].1));

        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for &t in &order {
            let (r, c, v) = triplets[t];
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let t: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        Self::from_triplets(d.len(), d.len(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        idx.binary_search(&c).map(|k| val[k]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows)
            .flat_map(|r| {
                let (idx, val) = self.row(r);
                idx.iter().zip(val).map(move |(&c, &v)| (r, c, v))
            })
            .collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .into_par_iter()
            .map(|r| {
                let (idx, val) = self.row(r);
                idx.iter().zip(val).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                out[c] += v * y[r];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// `diag(w) * self`
    pub fn scale_rows(&self, w: &[f64]) -> Self {
        assert_eq!(w.len(), self.nrows);
        let mut out = self.clone();
        for r in 0..self.nrows {
            for k in out.indptr[r]..out.indptr[r + 1] {
                out.values[k] *= w[r];
            }
        }
        out
    }

    /// `selfᵀ self`, accumulated row by row so that `(i, j)` and `(j, i)`
    /// receive bit-identical sums.
    pub fn gram(&self) -> Self {
        let mut t = Vec::new();
        for r in 0..self.nrows {
            let (idx, val) = self.row(r);
            for (&i, &vi) in idx.iter().zip(val) {
                for (&j, &vj) in idx.iter().zip(val) {
                    t.push((i, j, vi * vj));
                }
            }
        }
        Self::from_triplets(self.ncols, self.ncols, &t)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::Dimension(format!(
                "cannot add {}x{} and {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut t = self.triplets();
        t.extend(other.triplets());
        Ok(Self::from_triplets(self.nrows, self.ncols, &t))
    }

    /// Square submatrix keeping rows and columns listed in `keep`.
    pub fn principal_submatrix(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut t = Vec::new();
        for (new_r, &r) in keep.iter().enumerate() {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                if map[c] != usize::MAX {
                    t.push((new_r, map[c], v));
                }
            }
        }
        Self::from_triplets(keep.len(), keep.len(), &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest absolute asymmetry `max |A - Aᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets()
            .into_iter()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }
}

/// Finite-difference operator along one axis of `grid`.
///
/// Order 1 is the forward difference `(u[l+1] - u[l]) / Δ`; order 2 the
/// centered second difference `(u[l-1] - 2u[l] + u[l+1]) / Δ²`. Rows whose
/// stencil would leave the grid or touch a voxel outside `support` are
/// zero, which gives a zero derivative across boundaries.
pub fn difference_operator(grid: &Grid, axis: usize, order: u8, support: &[bool]) -> Result<CsrMatrix> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    if support.len() != grid.len() {
        return Err(Error::Dimension("support mask does not match grid".into()));
    }
    let h = grid.pitch()[axis];
    let n = grid.len();
    let mut t = Vec::new();
    for l in 0..n {
        if !support[l] {
            continue;
        }
        match order {
            1 => {
                if let Some(next) = grid.offset(l, axis, 1).filter(|&m| support[m]) {
                    t.push((l, l, -1.0 / h));
                    t.push((l, next, 1.0 / h));
                }
            }
            2 => {
                let prev = grid.offset(l, axis, -1).filter(|&m| support[m]);
                let next = grid.offset(l, axis, 1).filter(|&m| support[m]);
                if let (Some(p), Some(q)) = (prev, next) {
                    let h2 = h * h;
                    t.push((l, p, 1.0 / h2));
                    t.push((l, l, -2.0 / h2));
                    t.push((l, q, 1.0 / h2));
                }
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "difference order must be 1 or 2, got {other}"
                )))
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &t))
}

/// One block `diag(w) * op` of a stacked rectangular least-squares system.
#[derive(Clone, Debug)]
pub struct WeightedBlock {
    pub weights: Vec<f64>,
    pub op: CsrMatrix,
}

/// Normal equations `A = Σ_b opᵀ diag(w_b)² op` of a stacked system.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub matrix: CsrMatrix,
    weights: Vec<Vec<f64>>,
    weighted_ops: Vec<CsrMatrix>,
}

impl NormalEquations {
    pub fn assemble(blocks: Vec<WeightedBlock>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("no blocks to assemble".into()))?;
        let ncols = first.op.ncols();
        let mut weights = Vec::with_capacity(blocks.len());
        let mut weighted_ops = Vec::with_capacity(blocks.len());
        for b in blocks {
            if b.op.ncols() != ncols {
                return Err(Error::Dimension(format!(
                    "block has {} columns, expected {ncols}",
                    b.op.ncols()
                )));
            }
            if b.weights.len() != b.op.nrows() {
                return Err(Error::Dimension(format!(
                    "block weights have length {}, operator has {} rows",
                    b.weights.len(),
                    b.op.nrows()
                )));
            }
            weighted_ops.push(b.op.scale_rows(&b.weights));
            weights.push(b.weights);
        }
        let mut t = Vec::new();
        for w in &weighted_ops {
            t.extend(w.gram().triplets());
        }
        Ok(Self {
            matrix: CsrMatrix::from_triplets(ncols, ncols, &t),
            weights,
            weighted_ops,
        })
    }

    /// Right-hand side `(W_b op_b)ᵀ W_b y` for an observation `y` on block `b`.
    pub fn rhs(&self, block: usize, observation: &[f64]) -> Result<Vec<f64>> {
        let op = self
            .weighted_ops
            .get(block)
            .ok_or_else(|| Error::InvalidArgument(format!("no block {block}")))?;
        if observation.len() != op.nrows() {
            return Err(Error::Dimension("observation length mismatch".into()));
        }
        let wy: Vec<f64> = self.weights[block]
            .iter()
            .zip(observation)
            .map(|(w, y)| w * y)
            .collect();
        Ok(op.transpose_mul_vec(&wy))
    }

    /// Least-squares objective `Σ_b ‖W_b (op_b x - y_b)‖²`, with the
    /// observation of every block other than `data_block` taken as zero.
    pub fn objective(&self, data_block: usize, observation: &[f64], x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (b, op) in self.weighted_ops.iter().enumerate() {
            let ax = op.mul_vec(x);
            for (r, v) in ax.iter().enumerate() {
                let target = if b == data_block {
                    self.weights[b][r] * observation[r]
                } else {
                    0.0
                };
                total += (v - target).powi(2);
            }
        }
        total
    }

    /// Solves the normal equations. Unknowns whose diagonal entry is zero
    /// (no block touches them) are pinned to zero, which is the
    /// minimum-norm choice for those columns.
    pub fn solve(&self, rhs: &[f64], kind: PreconditionerKind, tol: f64, max_iter: usize) -> Result<PcgOutcome> {
        self.prepare(kind)?.solve(rhs, tol, max_iter)
    }

    /// Factors the preconditioner once for repeated solves with the same matrix.
    pub fn prepare(&self, kind: PreconditionerKind) -> Result<PreparedSystem> {
        let diag = self.matrix.diag();
        let keep: Vec<usize> = (0..diag.len()).filter(|&i| diag[i] != 0.0).collect();
        let sub = self.matrix.principal_submatrix(&keep);
        let precond = if keep.is_empty() {
            Preconditioner::Identity
        } else {
            Preconditioner::build(kind, &sub)?
        };
        Ok(PreparedSystem {
            n: diag.len(),
            keep,
            sub,
            precond,
        })
    }
}

/// Normal equations restricted to their non-trivial unknowns, with a
/// factored preconditioner.
#[derive(Clone, Debug)]
pub struct PreparedSystem {
    n: usize,
    keep: Vec<usize>,
    sub: CsrMatrix,
    precond: Preconditioner,
}

impl PreparedSystem {
    pub fn solve(&self, rhs: &[f64], tol: f64, max_iter: usize) -> Result<PcgOutcome> {
        if rhs.len() != self.n {
            return Err(Error::Dimension(format!(
                "right-hand side has length {}, system has {}",
                rhs.len(),
                self.n
            )));
        }
        if self.keep.is_empty() {
            return Ok(PcgOutcome {
                x: vec![0.0; self.n],
                iterations: 0,
                residual_history: vec![0.0],
                converged: true,
            });
        }
        let sub_rhs: Vec<f64> = self.keep.iter().map(|&i| rhs[i]).collect();
        let inner = pcg_solve(&self.sub, &sub_rhs, &self.precond, tol, max_iter)?;
        let mut x = vec![0.0; self.n];
        for (k, &i) in self.keep.iter().enumerate() {
            x[i] = inner.x[k];
        }
        Ok(PcgOutcome { x, ..inner })
    }
}

/// Preconditioner choice and stopping rule for the map-smoothing solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveSettings {
    pub precond: PreconditionerKind,
    /// relative residual
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            precond: PreconditionerKind::Ic0,
            tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PreconditionerKind {
    None,
    Jacobi,
    #[default]
    Ic0,
}

impl FromStr for PreconditionerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "jacobi" => Ok(Self::Jacobi),
            "ic0" => Ok(Self::Ic0),
            other => Err(Error::UnknownKind {
                what: "preconditioner",
                given: other.to_string(),
                options: "ic0, jacobi, none".into(),
            }),
        }
    }
}

/// Lower-triangular incomplete Cholesky factor with the sparsity of `tril(A)`.
#[derive(Clone, Debug)]
pub struct IncompleteCholesky {
    factor: CsrMatrix,
    /// diagonal shift that was needed for the factorization to succeed
    pub shift: f64,
}

impl IncompleteCholesky {
    /// IC(0) of `a`. If a pivot breaks down the factorization is retried on
    /// `a + s I`, starting at `s = 1e-3 max(diag)` and doubling.
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension("IC(0) needs a square matrix".into()));
        }
        if let Some(factor) = Self::factorize(a, 0.0) {
            return Ok(Self { factor, shift: 0.0 });
        }
        let max_diag = a.diag().into_iter().fold(0.0, f64::max);
        let mut shift = 1e-3 * max_diag.max(f64::MIN_POSITIVE);
        for _ in 0..64 {
            if let Some(factor) = Self::factorize(a, shift) {
                return Ok(Self { factor, shift });
            }
            shift *= 2.0;
        }
        Err(Error::SolverBreakdown { iteration: 0 })
    }

    fn factorize(a: &CsrMatrix, shift: f64) -> Option<CsrMatrix> {
        let n = a.nrows();
        // rows of L (sorted columns, diagonal last)
        let mut rows: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(n);
        for i in 0..n {
            let (idx, val) = a.row(i);
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for (&c, &v) in idx.iter().zip(val) {
                if c < i {
                    cols.push(c);
                    vals.push(v);
                }
            }
            let mut diag = a.get(i, i) + shift;
            for k in 0..cols.len() {
                let c = cols[k];
                let (ccols, cvals) = &rows[c];
                // sparse dot of row i (entries before k) with row c (excluding its diagonal)
                let mut s = 0.0;
                let (mut p, mut q) = (0, 0);
                let cend = ccols.len() - 1;
                while p < k && q < cend {
                    match cols[p].cmp(&ccols[q]) {
                        std::cmp::Ordering::Less => p += 1,
                        std::cmp::Ordering::Greater => q += 1,
                        std::cmp::Ordering::Equal => {
                            s += vals[p] * cvals[q];
                            p += 1;
                            q += 1;
                        }
                    }
                }
                vals[k] = (vals[k] - s) / cvals[cend];
                diag -= vals[k] * vals[k];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            cols.push(i);
            vals.push(diag.sqrt());
            rows.push((cols, vals));
        }
        let mut t = Vec::new();
        for (i, (cols, vals)) in rows.into_iter().enumerate() {
            t.extend(cols.into_iter().zip(vals).map(|(c, v)| (i, c, v)));
        }
        Some(CsrMatrix::from_triplets(n, n, &t))
    }

    /// Solves `L Lᵀ z = r`.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let n = l.nrows();
        let mut y = r.to_vec();
        for i in 0..n {
            let (idx, val) = l.row(i);
            let last = idx.len() - 1;
            let mut s = y[i];
            for k in 0..last {
                s -= val[k] * y[idx[k]];
            }
            y[i] = s / val[last];
        }
        for i in (0..n).rev() {
            let (idx, val) = l.row(i);
            let last = idx.len() - 1;
            y[i] /= val[last];
            let zi = y[i];
            for k in 0..last {
                y[idx[k]] -= val[k] * zi;
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub enum Preconditioner {
    Identity,
    /// inverse diagonal
    Jacobi(Vec<f64>),
    IncompleteCholesky(IncompleteCholesky),
}

impl Preconditioner {
    pub fn build(kind: PreconditionerKind, a: &CsrMatrix) -> Result<Self> {
        Ok(match kind {
            PreconditionerKind::None => Self::Identity,
            PreconditionerKind::Jacobi => Self::Jacobi(
                a.diag()
                    .into_iter()
                    .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
                    .collect(),
            ),
            PreconditionerKind::Ic0 => Self::IncompleteCholesky(IncompleteCholesky::new(a)?),
        })
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity => r.to_vec(),
            Self::Jacobi(inv) => r.iter().zip(inv).map(|(a, b)| a * b).collect(),
            Self::IncompleteCholesky(ic) => ic.apply(r),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖b - A x_k‖ / ‖b‖` for k = 0..=iterations
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients from a zero initial guess. Stops when
/// the relative residual drops to `tol` or after `max_iter` iterations.
pub fn pcg_solve(a: &CsrMatrix, b: &[f64], precond: &Preconditioner, tol: f64, max_iter: usize) -> Result<PcgOutcome> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "system is {}x{} with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(PcgOutcome {
            x,
            iterations: 0,
            residual_history: vec![0.0],
            converged: true,
        });
    }
    let mut r = b.to_vec();
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut history = vec![1.0];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let ap = a.mul_vec(&p);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::SolverBreakdown {
                iteration: iterations + 1,
            });
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        if !alpha.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverBreakdown { iteration: iterations });
        }
        let rel = dot(&r, &r).sqrt() / b_norm;
        history.push(rel);
        if rel <= tol {
            converged = true;
            break;
        }
        z = precond.apply(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(PcgOutcome {
        x,
        iterations,
        residual_history: history,
        converged,
    })
}
