//! Dense kernels behind the encoding operator.
//!
//! Every kernel writes disjoint output elements from each worker and sums
//! over samples in ascending order, so results do not depend on the thread
//! count or on how the sample range is split into blocks.

use num_complex::Complex64;
use rayon::prelude::*;

/// Voxels per parallel work item of the adjoint kernel.
const VOXEL_CHUNK: usize = 64;

/// Row-major block of the phase matrix, `data[κ * cols + l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl PhaseBlock {
    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<Complex64>()) as u64
    }
}

/// Bytes needed for a `rows x cols` phase block.
pub fn phase_bytes(rows: usize, cols: usize) -> u64 {
    rows as u64 * cols as u64 * std::mem::size_of::<Complex64>() as u64
}

/// `P' = exp(i K' R)` for `k_rows` (row-major, `terms` values per sample)
/// and `spatial` stored column by column (`terms` values per voxel).
/// The phase product and the complex exponential are fused per element.
pub fn phase_block(k_rows: &[f64], spatial: &[f64], terms: usize) -> PhaseBlock {
    assert!(terms > 0 && k_rows.len() % terms == 0 && spatial.len() % terms == 0);
    let rows = k_rows.len() / terms;
    let cols = spatial.len() / terms;
    let mut data = vec![Complex64::new(0.0, 0.0); rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(k, out)| {
            let kr = &k_rows[k * terms..(k + 1) * terms];
            for (l, o) in out.iter_mut().enumerate() {
                let rc = &spatial[l * terms..(l + 1) * terms];
                let mut phi = 0.0;
                for p in 0..terms {
                    phi += kr[p] * rc[p];
                }
                let (s, c) = phi.sin_cos();
                *o = Complex64::new(c, s);
            }
        });
    }
    PhaseBlock { rows, cols, data }
}

/// `out = P' Q` with `Q` an `L x Γ` row-major matrix; `out` is `rows x Γ`
/// row-major and is overwritten.
pub fn forward(block: &PhaseBlock, q: &[Complex64], gamma: usize, out: &mut [Complex64]) {
    debug_assert_eq!(q.len(), block.cols * gamma);
    debug_assert_eq!(out.len(), block.rows * gamma);
    out.par_chunks_mut(gamma).enumerate().for_each(|(k, acc)| {
        acc.fill(Complex64::new(0.0, 0.0));
        for (l, p) in block.row(k).iter().enumerate() {
            let ql = &q[l * gamma..(l + 1) * gamma];
            for (a, v) in acc.iter_mut().zip(ql) {
                *a += p * v;
            }
        }
    });
}

/// `acc[l, λ] += Σ_κ conj(y[κ, λ]) P'[κ, l]`, the transposed form of
/// `Y^H P'`. `y` is `rows x Γ` row-major, `acc` is `L x Γ` row-major.
pub fn adjoint_accumulate(block: &PhaseBlock, y: &[Complex64], gamma: usize, acc: &mut [Complex64]) {
    debug_assert_eq!(y.len(), block.rows * gamma);
    debug_assert_eq!(acc.len(), block.cols * gamma);
    let conj: Vec<Complex64> = y.iter().map(|v| v.conj()).collect();
    acc.par_chunks_mut(VOXEL_CHUNK * gamma)
        .enumerate()
        .for_each(|(chunk, out)| {
            let l0 = chunk * VOXEL_CHUNK;
            let n = out.len() / gamma;
            for k in 0..block.rows {
                let yk = &conj[k * gamma..(k + 1) * gamma];
                let prow = &block.row(k)[l0..l0 + n];
                for (i, p) in prow.iter().enumerate() {
                    let o = &mut out[i * gamma..(i + 1) * gamma];
                    for (a, v) in o.iter_mut().zip(yk) {
                        *a += v * p;
                    }
                }
            }
        });
}

/// `Q = S ∘ (x 1ᵀ)`, row-major `L x Γ`.
pub fn weight(sens: &[Complex64], x: &[Complex64], gamma: usize) -> Vec<Complex64> {
    let mut q = sens.to_vec();
    q.par_chunks_mut(gamma).zip(x.par_iter()).for_each(|(row, v)| {
        for s in row {
            *s *= v;
        }
    });
    q
}

/// `out_l = conj(Σ_λ acc[l, λ] S[l, λ])`.
pub fn reverse_weight(acc: &[Complex64], sens: &[Complex64], gamma: usize) -> Vec<Complex64> {
    acc.par_chunks(gamma)
        .zip(sens.par_chunks(gamma))
        .map(|(a, s)| {
            let mut sum = Complex64::new(0.0, 0.0);
            for (x, y) in a.iter().zip(s) {
                sum += x * y;
            }
            sum.conj()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_phase_is_all_ones() {
        let b = phase_block(&[0.0, 1.0, 0.0, 2.0], &[5.0, 0.0, 3.0, 0.0, 1.0, 0.0], 2);
        assert_eq!((b.rows, b.cols), (2, 3));
        assert!(b.data.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn quarter_turn_is_i() {
        let b = phase_block(&[std::f64::consts::FRAC_PI_2], &[1.0], 1);
        assert!((b.data[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k, l, t) = (13, 17, 4);
        let kr: Vec<f64> = (0..k * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sp: Vec<f64> = (0..l * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b = phase_block(&kr, &sp, t);
        for i in 0..k {
            for j in 0..l {
                let dot: f64 = (0..t).map(|p| kr[i * t + p] * sp[j * t + p]).sum();
                let e = Complex64::new(0.0, dot).exp();
                assert!((b.data[i * l + j] - e).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn block_splitting_is_bitwise_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (k, l, t, g) = (40, 150, 3, 2);
        let kr: Vec<f64> = (0..k * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sp: Vec<f64> = (0..l * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<Complex64> = (0..k * g)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let whole = phase_block(&kr, &sp, t);
        let mut a = vec![Complex64::new(0.0, 0.0); l * g];
        adjoint_accumulate(&whole, &y, g, &mut a);
        let mut b = vec![Complex64::new(0.0, 0.0); l * g];
        for (s, e) in [(0, 7), (7, 8), (8, 40)] {
            let part = phase_block(&kr[s * t..e * t], &sp, t);
            adjoint_accumulate(&part, &y[s * g..e * g], g, &mut b);
        }
        assert_eq!(a, b);
    }
}
