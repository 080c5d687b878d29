//! Separable n-dimensional FFT over x-fastest grids.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// In-place, unnormalized transform along every axis with more than one voxel.
pub fn fft_nd(data: &mut [Complex64], dims: [usize; 3], direction: FftDirection) {
    assert_eq!(data.len(), dims.iter().product::<usize>());
    let mut planner = FftPlanner::new();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let fft = planner.plan_fft(n, direction);
        let stride = strides[axis];
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for start in 0..data.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            for (m, v) in line.iter_mut().enumerate() {
                *v = data[start + m * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (m, v) in line.iter().enumerate() {
                data[start + m * stride] = *v;
            }
        }
    }
}

/// Index of the centered k-space grid point (`m - n/2`) that FFT bin `u` holds.
#[inline]
pub fn centered_index(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dims = [4, 3, 2];
        let orig: Vec<Complex64> = (0..24)
            .map(|i| Complex64::new(i as f64, (i * i) as f64 * 0.1))
            .collect();
        let mut d = orig.clone();
        fft_nd(&mut d, dims, FftDirection::Forward);
        fft_nd(&mut d, dims, FftDirection::Inverse);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a / 24.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let dims = [3, 5, 1];
        let x: Vec<Complex64> = (0..15).map(|i| Complex64::new((i as f64).cos(), i as f64)).collect();
        let mut y = x.clone();
        fft_nd(&mut y, dims, FftDirection::Forward);
        for u in 0..3 {
            for v in 0..5 {
                let mut s = Complex64::new(0.0, 0.0);
                for a in 0..3 {
                    for b in 0..5 {
                        let ph = -2.0 * std::f64::consts::PI * ((u * a) as f64 / 3.0 + (v * b) as f64 / 5.0);
                        s += x[a + 3 * b] * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((y[u + 3 * v] - s).norm() < 1e-11);
            }
        }
    }
}
