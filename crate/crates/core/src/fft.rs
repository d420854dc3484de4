//! Two-dimensional FFT on row-major grids, built from `rustfft` 1-D plans.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    /// Normalized by `1 / (width * height)`.
    Inverse,
}

pub(crate) fn fft2(data: &mut [Complex64], width: usize, height: usize, dir: Direction) {
    assert_eq!(data.len(), width * height);
    let mut planner = FftPlanner::<f64>::new();
    let (row_plan, col_plan) = match dir {
        Direction::Forward => (
            planner.plan_fft_forward(width),
            planner.plan_fft_forward(height),
        ),
        Direction::Inverse => (
            planner.plan_fft_inverse(width),
            planner.plan_fft_inverse(height),
        ),
    };
    row_plan.process(data);

    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for u in 0..width {
        for v in 0..height {
            column[v] = data[v * width + u];
        }
        col_plan.process(&mut column);
        for v in 0..height {
            data[v * width + u] = column[v];
        }
    }
    if dir == Direction::Inverse {
        let scale = 1.0 / (width * height) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }
}

pub(crate) fn forward_real(values: &[f64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft2(&mut buf, width, height, Direction::Forward);
    buf
}

/// Signed integer frequency of bin `k` in an `n`-point transform.
#[inline]
pub(crate) fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// True for the unpaired Nyquist bin of an even-length transform.
#[inline]
pub(crate) fn is_nyquist(k: usize, n: usize) -> bool {
    n.is_multiple_of(2) && k == n / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_then_inverse_is_identity() {
        let (w, h) = (6, 5);
        let vals: Vec<f64> = (0..w * h).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut buf = forward_real(&vals, w, h);
        fft2(&mut buf, w, h, Direction::Inverse);
        for (a, b) in buf.iter().zip(&vals) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn signed_bins() {
        assert_eq!(signed_bin(0, 8), 0);
        assert_eq!(signed_bin(4, 8), 4);
        assert_eq!(signed_bin(5, 8), -3);
        assert_eq!(signed_bin(3, 5), -2);
        assert!(is_nyquist(4, 8));
        assert!(!is_nyquist(2, 5));
    }
}
