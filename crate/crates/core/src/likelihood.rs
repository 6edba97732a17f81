//! Debiased Whittle likelihood, score and Fisher matrix, plus the unblurred
//! large-sample counterparts for comparison.

use crate::error::{Error, Result};
use crate::grid::{FieldSample, GridSpec, Window};
use crate::matern::{spectral_gradient_hessian_unchecked, MaternParams};
use crate::spectral::{gridded_log_gradient, gridded_sdf, windowed_dft, BlurredGradient, Blurrer};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};

pub type Vector3 = [f64; 3];
pub type Matrix3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    #[default]
    All,
    /// Wavenumbers with `|k|` at most the smaller Nyquist wavenumber.
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MaskSpec {
    pub shape: MaskShape,
    pub exclude_zero: bool,
}

impl MaskSpec {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn disk() -> Self {
        Self { shape: MaskShape::Disk, exclude_zero: false }
    }

    pub fn build(&self, spec: &GridSpec) -> Array2<bool> {
        let radius = spec.min_nyquist();
        let zero = spec.zero_index();
        Array2::from_shape_fn(spec.shape(), |(iy, ix)| {
            let inside = match self.shape {
                MaskShape::All => true,
                // Small slack so the axis Nyquist points stay inside.
                MaskShape::Disk => spec.k_norm(iy, ix) <= radius * (1.0 + 1e-12),
            };
            inside && !(self.exclude_zero && (iy, ix) == zero)
        })
    }
}

impl std::str::FromStr for MaskShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "disk" => Ok(Self::Disk),
            other => Err(Error::InvalidArgument(format!("unknown mask `{other}`"))),
        }
    }
}

/// Likelihood value, score and Fisher matrix at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: Vector3,
    pub fisher: Matrix3,
}

/// Observed periodogram with its window, grid and wavenumber mask.
#[derive(Debug)]
pub struct LikelihoodContext {
    periodogram: Array2<f64>,
    blurrer: Blurrer,
    mask: Array2<bool>,
    mask_spec: MaskSpec,
    cache: Mutex<Option<(MaternParams, Arc<BlurredGradient>)>>,
}

impl Clone for LikelihoodContext {
    fn clone(&self) -> Self {
        Self {
            periodogram: self.periodogram.clone(),
            blurrer: self.blurrer.clone(),
            mask: self.mask.clone(),
            mask_spec: self.mask_spec,
            cache: Mutex::new(None),
        }
    }
}

impl LikelihoodContext {
    pub fn new(field: &FieldSample, w: &Window, mask: MaskSpec) -> Result<Self> {
        let h = windowed_dft(field, w)?;
        Self::from_periodogram(h.periodogram(), w, mask)
    }

    pub fn from_periodogram(periodogram: Array2<f64>, w: &Window, mask: MaskSpec) -> Result<Self> {
        Self::with_blurrer(periodogram, Blurrer::new(w), mask)
    }

    /// Reuses an existing blurring context (the window autocorrelation is the expensive part).
    pub fn with_blurrer(periodogram: Array2<f64>, blurrer: Blurrer, mask: MaskSpec) -> Result<Self> {
        let spec = *blurrer.spec();
        spec.check_shape(periodogram.dim())?;
        if periodogram.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("periodogram must be finite and nonnegative".into()));
        }
        let m = mask.build(&spec);
        if !m.iter().any(|b| *b) {
            return Err(Error::InvalidArgument("wavenumber mask is empty".into()));
        }
        Ok(Self { periodogram, blurrer, mask: m, mask_spec: mask, cache: Mutex::new(None) })
    }

    /// Replaces the mask, for example to drop individual wavenumbers.
    pub fn with_mask_array(mut self, mask: Array2<bool>) -> Result<Self> {
        self.blurrer.spec().check_shape(mask.dim())?;
        if !mask.iter().any(|b| *b) {
            return Err(Error::InvalidArgument("wavenumber mask is empty".into()));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn spec(&self) -> &GridSpec {
        self.blurrer.spec()
    }

    pub fn blurrer(&self) -> &Blurrer {
        &self.blurrer
    }

    pub fn periodogram(&self) -> &Array2<f64> {
        &self.periodogram
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn mask_spec(&self) -> MaskSpec {
        self.mask_spec
    }

    fn inv_mn(&self) -> f64 {
        1.0 / self.spec().cells() as f64
    }

    /// Blurred density and derivatives at `theta`, cached on the last point.
    pub fn blurred(&self, theta: &MaternParams) -> Result<Arc<BlurredGradient>> {
        theta.validate()?;
        let mut guard = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((t, g)) = guard.as_ref() {
            if t == theta {
                return Ok(Arc::clone(g));
            }
        }
        let g = Arc::new(self.blurrer.sdf_with_gradient(theta)?);
        *guard = Some((*theta, Arc::clone(&g)));
        Ok(g)
    }

    pub fn evaluate(&self, theta: &MaternParams) -> Result<Evaluation> {
        let g = self.blurred(theta)?;
        Ok(evaluate_terms(
            &self.periodogram,
            &self.mask,
            &g.sdf.values,
            &g.mbar,
            self.inv_mn(),
        ))
    }
}

fn evaluate_terms(
    periodogram: &Array2<f64>,
    mask: &Array2<bool>,
    sdf: &Array2<f64>,
    m: &[Array2<f64>; 3],
    inv_mn: f64,
) -> Evaluation {
    let mut loglik = 0.0;
    let mut score = [0.0; 3];
    let mut fisher = [[0.0; 3]; 3];
    for (ij, &keep) in mask.indexed_iter() {
        if !keep {
            continue;
        }
        let s = sdf[ij];
        let ratio = periodogram[ij] / s;
        loglik += s.ln() + ratio;
        let mk = [m[0][ij], m[1][ij], m[2][ij]];
        for a in 0..3 {
            score[a] += mk[a] * (1.0 - ratio);
            for b in a..3 {
                fisher[a][b] += mk[a] * mk[b];
            }
        }
    }
    for a in 0..3 {
        score[a] *= -inv_mn;
        for b in a..3 {
            fisher[a][b] *= inv_mn;
            fisher[b][a] = fisher[a][b];
        }
    }
    Evaluation { loglik: -inv_mn * loglik, score, fisher }
}

/// `Lbar(theta) = -(1/MN) sum_k [ln Sbar + |H|^2 / Sbar]`.
pub fn blurred_loglik(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<f64> {
    let sdf = ctx.blurrer.sdf(theta)?;
    let mut acc = 0.0;
    for (ij, &keep) in ctx.mask.indexed_iter() {
        if keep {
            let s = sdf.values[ij];
            acc += s.ln() + ctx.periodogram[ij] / s;
        }
    }
    Ok(-ctx.inv_mn() * acc)
}

/// `gammabar = -(1/MN) sum_k mbar(k) [1 - |H|^2 / Sbar]`.
pub fn blurred_score(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Vector3> {
    Ok(ctx.evaluate(theta)?.score)
}

/// `Fbar = (1/MN) sum_k mbar mbar^T`.
pub fn blurred_fisher(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Matrix3> {
    Ok(ctx.evaluate(theta)?.fisher)
}

fn unblurred_terms(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Evaluation> {
    let spec = ctx.spec();
    let sdf = gridded_sdf(theta, spec)?;
    let m = gridded_log_gradient(theta, spec)?;
    Ok(evaluate_terms(&ctx.periodogram, &ctx.mask, &sdf, &m, ctx.inv_mn()))
}

pub fn unblurred_loglik(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<f64> {
    Ok(unblurred_terms(theta, ctx)?.loglik)
}

pub fn unblurred_score(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Vector3> {
    Ok(unblurred_terms(theta, ctx)?.score)
}

/// Data-independent `F = (1/MN) sum_k m m^T` over unblurred derivatives.
pub fn unblurred_fisher(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Matrix3> {
    Ok(unblurred_terms(theta, ctx)?.fisher)
}

/// `-(1/MN) sum_k [dm + (m m^T - dm) |H|^2 / S]`.
pub fn unblurred_hessian(theta: &MaternParams, ctx: &LikelihoodContext) -> Result<Matrix3> {
    let spec = ctx.spec();
    let sdf = gridded_sdf(theta, spec)?;
    let m = gridded_log_gradient(theta, spec)?;
    let mut h = [[0.0; 3]; 3];
    for (ij, &keep) in ctx.mask.indexed_iter() {
        if !keep {
            continue;
        }
        let (iy, ix) = ij;
        let dm = spectral_gradient_hessian_unchecked(theta, spec.k_norm(iy, ix));
        let ratio = ctx.periodogram[ij] / sdf[ij];
        for a in 0..3 {
            for b in 0..3 {
                let mm = m[a][ij] * m[b][ij];
                h[a][b] += dm[a][b] + (mm - dm[a][b]) * ratio;
            }
        }
    }
    let s = -ctx.inv_mn();
    h.iter_mut().flatten().for_each(|v| *v *= s);
    Ok(h)
}
