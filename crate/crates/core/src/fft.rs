//! Thin two-dimensional FFT layer over `rustfft` with a shared plan cache.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::{Arc, Mutex, OnceLock};

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

pub(crate) fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut p = planner().lock().unwrap_or_else(|e| e.into_inner());
    if inverse {
        p.plan_fft_inverse(len)
    } else {
        p.plan_fft_forward(len)
    }
}

/// Unnormalized in-place 2-D transform (`exp(-i...)` forward, `exp(+i...)` inverse).
pub fn fft2_inplace(a: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = a.dim();
    if cols > 1 {
        let f = plan(cols, inverse);
        let mut scratch = vec![Complex64::default(); f.get_inplace_scratch_len()];
        match a.as_slice_mut() {
            Some(s) => f.process_with_scratch(s, &mut scratch),
            None => {
                for mut row in a.axis_iter_mut(Axis(0)) {
                    let mut buf: Vec<Complex64> = row.iter().copied().collect();
                    f.process_with_scratch(&mut buf, &mut scratch);
                    row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
                }
            }
        }
    }
    if rows > 1 {
        let f = plan(rows, inverse);
        let mut scratch = vec![Complex64::default(); f.get_inplace_scratch_len()];
        let mut buf = vec![Complex64::default(); rows];
        for mut col in a.axis_iter_mut(Axis(1)) {
            buf.iter_mut().zip(col.iter()).for_each(|(d, s)| *d = *s);
            f.process_with_scratch(&mut buf, &mut scratch);
            col.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
        }
    }
}

pub fn fft2(a: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut out = a.as_standard_layout().into_owned();
    fft2_inplace(&mut out, inverse);
    out
}

/// DFT bin of centered index `i` on an axis of length `len`.
#[inline]
pub fn centered_to_bin(i: usize, len: usize) -> usize {
    (i + len - len / 2) % len
}

/// Reorder a natural-order DFT array to the centered layout (zero at `[n/2, m/2]`).
pub fn to_centered<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((rows, cols), |(iy, ix)| {
        a[[centered_to_bin(iy, rows), centered_to_bin(ix, cols)]]
    })
}

/// Inverse of [`to_centered`].
pub fn from_centered<T: Copy + Default>(a: &Array2<T>) -> Array2<T> {
    let (rows, cols) = a.dim();
    let mut out = Array2::from_elem((rows, cols), T::default());
    for ((iy, ix), v) in a.indexed_iter() {
        out[[centered_to_bin(iy, rows), centered_to_bin(ix, cols)]] = *v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_input() {
        let a = Array2::from_shape_fn((5, 6), |(i, j)| Complex64::new(i as f64 - 0.3 * j as f64, j as f64));
        let b = fft2(&fft2(&a, false), true);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y / 30.0).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let (r, c) = (3, 4);
        let a = Array2::from_shape_fn((r, c), |(i, j)| Complex64::new((i * 7 + j * 3) as f64 % 5.0, 0.0));
        let f = fft2(&a, false);
        for p in 0..r {
            for q in 0..c {
                let mut s = Complex64::default();
                for i in 0..r {
                    for j in 0..c {
                        let ph = -2.0 * std::f64::consts::PI * ((p * i) as f64 / r as f64 + (q * j) as f64 / c as f64);
                        s += a[[i, j]] * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((s - f[[p, q]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn centering_round_trip() {
        for &(r, c) in &[(4, 5), (1, 1), (3, 2)] {
            let a = Array2::from_shape_fn((r, c), |(i, j)| (i * 10 + j) as i64);
            assert_eq!(from_centered(&to_centered(&a)), a);
            let cen = to_centered(&a);
            assert_eq!(cen[[r / 2, c / 2]], 0);
        }
    }
}
