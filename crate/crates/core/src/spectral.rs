//! Windowed DFT, periodogram, and exact blurring of the Matérn spectral density.
//!
//! With `c = (1/2pi) sqrt(dx dy / (M N))` the coefficients are
//! `H(k) = c * sum_x w(x) H(x) exp(-i k.x)` and the expected periodogram is
//! `Sbar(k) = c^2 * sum_y W(y) C(|y|) exp(-i k.y)` over all `(2M-1)(2N-1)` lags.
//! Because `exp(-i k.y)` is periodic in the lag indices with periods `(M, N)`,
//! the lag sequence is folded onto an `M x N` array and transformed once.

use crate::error::Result;
use crate::fft::{fft2, fft2_inplace, from_centered, to_centered};
use crate::grid::{window_autocorrelation, FieldSample, GridSpec, Window, WindowAutocorrelation};
use crate::matern::{
    covariance_unchecked, covariance_with_gradient, log_spectral_gradient_unchecked,
    spectral_density_unchecked, MaternParams,
};
use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// DFT normalization `(1/2pi) sqrt(dx dy / (M N))`.
pub fn dft_normalization(spec: &GridSpec) -> f64 {
    (spec.dx * spec.dy / spec.cells() as f64).sqrt() / (2.0 * PI)
}

/// Windowed Fourier coefficients on the centered wavenumber layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub spec: GridSpec,
    pub coefficients: Array2<Complex64>,
    pub normalization: f64,
}

impl SpectralField {
    pub fn periodogram(&self) -> Array2<f64> {
        self.coefficients.mapv(|c| c.norm_sqr())
    }

    /// Reconstructs `w(x) H(x)` by the inverse transform.
    pub fn inverse(&self) -> Array2<f64> {
        let natural = from_centered(&self.coefficients);
        let scale = 1.0 / (self.normalization * self.spec.cells() as f64);
        fft2(&natural, true).mapv(|c| c.re * scale)
    }
}

pub fn windowed_dft(field: &FieldSample, w: &Window) -> Result<SpectralField> {
    let spec = field.spec;
    spec.check_shape(w.values().dim())?;
    let mut a = Array2::from_shape_fn(spec.shape(), |ij| {
        Complex64::new(field.values[ij] * w.values()[ij], 0.0)
    });
    fft2_inplace(&mut a, false);
    let c = dft_normalization(&spec);
    a.mapv_inplace(|z| z * c);
    Ok(SpectralField { spec, coefficients: to_centered(&a), normalization: c })
}

pub fn periodogram(spectral: &SpectralField) -> Array2<f64> {
    spectral.periodogram()
}

/// Convenience: periodogram of a field under a window.
pub fn field_periodogram(field: &FieldSample, w: &Window) -> Result<Array2<f64>> {
    Ok(windowed_dft(field, w)?.periodogram())
}

/// Strictly positive expected periodogram on the centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurredSdf {
    pub spec: GridSpec,
    pub values: Array2<f64>,
}

/// Blurred density together with its three parameter derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurredGradient {
    pub sdf: BlurredSdf,
    /// `dSbar/dtheta` for `(sigma2, nu, rho)`.
    pub d_sdf: [Array2<f64>; 3],
    /// `mbar = dSbar/dtheta / Sbar`.
    pub mbar: [Array2<f64>; 3],
}

/// Reusable blurring context holding the window autocorrelation.
#[derive(Debug, Clone)]
pub struct Blurrer {
    spec: GridSpec,
    window: Window,
    autocorr: WindowAutocorrelation,
}

impl Blurrer {
    pub fn new(w: &Window) -> Self {
        Self { spec: *w.spec(), window: w.clone(), autocorr: window_autocorrelation(w) }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn autocorrelation(&self) -> &WindowAutocorrelation {
        &self.autocorr
    }

    /// Lag distances on the quarter grid `m' in [0, M)`, `n' in [0, N)`.
    fn quarter_distances(&self) -> Vec<f64> {
        let s = self.spec;
        (0..s.n)
            .flat_map(|j| (0..s.m).map(move |i| (i as f64 * s.dx).hypot(j as f64 * s.dy)))
            .collect()
    }

    /// Folds `W(y) f(|m'|, |n'|)` modulo `(M, N)`, transforms, returns the centered real part times `c^2`.
    fn fold_transform(&self, quarter: &[f64]) -> Array2<f64> {
        let s = self.spec;
        let (m, n) = (s.m as isize, s.n as isize);
        let mut folded = Array2::<Complex64>::zeros(s.shape());
        for np in -(n - 1)..n {
            let row = (np.rem_euclid(n)) as usize;
            let qj = np.unsigned_abs() * s.m;
            for mp in -(m - 1)..m {
                let col = (mp.rem_euclid(m)) as usize;
                let v = self.autocorr.at(mp, np) * quarter[qj + mp.unsigned_abs()];
                folded[[row, col]].re += v;
            }
        }
        fft2_inplace(&mut folded, false);
        let c2 = dft_normalization(&s).powi(2);
        to_centered(&folded.mapv(|z| z.re * c2))
    }

    pub fn sdf(&self, theta: &MaternParams) -> Result<BlurredSdf> {
        theta.validate()?;
        let cov: Vec<f64> = self
            .quarter_distances()
            .par_iter()
            .map(|&r| covariance_unchecked(theta, r))
            .collect();
        Ok(BlurredSdf { spec: self.spec, values: self.fold_transform(&cov) })
    }

    pub fn sdf_with_gradient(&self, theta: &MaternParams) -> Result<BlurredGradient> {
        theta.validate()?;
        let pairs: Vec<(f64, [f64; 3])> = self
            .quarter_distances()
            .par_iter()
            .map(|&r| covariance_with_gradient(theta, r))
            .collect();
        let cov: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let sdf = self.fold_transform(&cov);
        let d_sdf: [Array2<f64>; 3] = std::array::from_fn(|i| {
            let g: Vec<f64> = pairs.iter().map(|p| p.1[i]).collect();
            self.fold_transform(&g)
        });
        let mbar: [Array2<f64>; 3] = std::array::from_fn(|i| &d_sdf[i] / &sdf);
        Ok(BlurredGradient { sdf: BlurredSdf { spec: self.spec, values: sdf }, d_sdf, mbar })
    }
}

pub fn blurred_sdf(theta: &MaternParams, w: &Window, spec: &GridSpec) -> Result<BlurredSdf> {
    spec.check_shape(w.values().dim())?;
    Blurrer::new(w).sdf(theta)
}

/// The blurred density under its statistical name `E|H(k)|^2`.
pub fn expected_periodogram(theta: &MaternParams, w: &Window, spec: &GridSpec) -> Result<BlurredSdf> {
    blurred_sdf(theta, w, spec)
}

pub fn blurred_sdf_gradient(theta: &MaternParams, w: &Window, spec: &GridSpec) -> Result<BlurredGradient> {
    spec.check_shape(w.values().dim())?;
    Blurrer::new(w).sdf_with_gradient(theta)
}

/// Unblurred `S(|k|)` sampled on the centered wavenumber grid.
pub fn gridded_sdf(theta: &MaternParams, spec: &GridSpec) -> Result<Array2<f64>> {
    theta.validate()?;
    Ok(Array2::from_shape_fn(spec.shape(), |(iy, ix)| {
        spectral_density_unchecked(theta, spec.k_norm(iy, ix))
    }))
}

/// Unblurred `m_theta(|k|)` on the centered grid.
pub fn gridded_log_gradient(theta: &MaternParams, spec: &GridSpec) -> Result<[Array2<f64>; 3]> {
    theta.validate()?;
    let vals = Array2::from_shape_fn(spec.shape(), |(iy, ix)| {
        log_spectral_gradient_unchecked(theta, spec.k_norm(iy, ix))
    });
    Ok(std::array::from_fn(|i| vals.mapv(|g| g[i])))
}
