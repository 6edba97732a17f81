//! Residual analysis, the `s2_X` model test, sample-variance bias predictors,
//! and histogram / Q-Q data products.

use crate::error::{Error, Result};
use crate::grid::{window_autocorrelation, FieldSample, GridSpec, Window};
use crate::likelihood::LikelihoodContext;
use crate::matern::{covariance_unchecked, fluctuation_scale, MaternParams};
use crate::spectral::Blurrer;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::PI;

/// `X(k) = |H(k)|^2 / Sbar(k)` on the centered grid; entries outside the mask are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub spec: GridSpec,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl ResidualMap {
    pub fn from_values(spec: GridSpec, values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        spec.check_shape(values.dim())?;
        spec.check_shape(mask.dim())?;
        Ok(Self { spec, values, mask })
    }

    /// One value per `{k, -k}` pair inside the mask; self-conjugate wavenumbers are left out.
    pub fn hermitian_unique(&self) -> Vec<f64> {
        let s = self.spec;
        let mut out = Vec::with_capacity(s.cells() / 2);
        for ((iy, ix), v) in self.values.indexed_iter() {
            let (ny, nx) = s.negated_index(iy, ix);
            let own = iy * s.m + ix;
            let partner = ny * s.m + nx;
            if own < partner && self.mask[[iy, ix]] && self.mask[[ny, nx]] {
                out.push(*v);
            }
        }
        out
    }

    /// All masked values, both members of each Hermitian pair included.
    pub fn masked(&self) -> Vec<f64> {
        self.values.iter().zip(self.mask.iter()).filter(|(_, m)| **m).map(|(v, _)| *v).collect()
    }
}

pub fn residuals(theta_hat: &MaternParams, ctx: &LikelihoodContext) -> Result<ResidualMap> {
    let g = ctx.blurred(theta_hat)?;
    let mut values = ctx.periodogram() / &g.sdf.values;
    values.zip_mut_with(ctx.mask(), |v, keep| {
        if !keep {
            *v = f64::NAN
        }
    });
    Ok(ResidualMap { spec: *ctx.spec(), values, mask: ctx.mask().clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// Exceedance probability `P(s2_X > observed)`.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// Where the tested parameters come from; sets the null variance of `s2_X`.
///
/// At a likelihood maximum the `sigma2` score pins `mean X` to one, which
/// removes the part of `(X - 1)^2` correlated with `X - 1` and halves the
/// variance. The other score directions remove nothing further because
/// `d ln Sbar / d sigma2` is constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NullModel {
    /// Maximum-likelihood estimate from the same wavenumbers: `N(1, 4 / count)`.
    #[default]
    Fitted,
    /// Parameters fixed independently of the data: `N(1, 8 / count)`.
    Known,
}

impl NullModel {
    pub fn variance_factor(self) -> f64 {
        match self {
            Self::Fitted => 4.0,
            Self::Known => 8.0,
        }
    }
}

/// Smallest number of independent residuals for which the normal null is trusted.
pub const NORMAL_GUARD: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Independent residuals entering the statistic.
    pub count: usize,
    pub mean_x: f64,
    pub var_x: f64,
    pub s2x: f64,
    pub null_mean: f64,
    pub null_variance: f64,
    pub z: f64,
    pub p_value: f64,
    pub sidedness: Sidedness,
    #[serde(default)]
    pub null_model: NullModel,
    pub level: f64,
    pub decision: Decision,
    /// Set when `count` is below the normal-approximation guard.
    pub small_sample: bool,
}

/// `s2_X = mean (X - 1)^2` over independent residuals, tested against the normal null of `null`.
pub fn model_test(map: &ResidualMap, level: f64, sidedness: Sidedness, null: NullModel) -> Result<ResidualReport> {
    test_values(&map.hermitian_unique(), level, sidedness, null)
}

pub fn test_values(x: &[f64], level: f64, sidedness: Sidedness, null: NullModel) -> Result<ResidualReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two residuals".into()));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let var_x = x.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / (n - 1.0);
    let s2x = x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n;
    let null_variance = null.variance_factor() / n;
    let z = (s2x - 1.0) / null_variance.sqrt();
    let normal = Normal::standard();
    let p_value = match sidedness {
        Sidedness::TwoSided => 2.0 * normal.sf(z.abs()),
        Sidedness::Upper => normal.sf(z),
    };
    let decision = if p_value < 1.0 - level { Decision::Reject } else { Decision::Accept };
    Ok(ResidualReport {
        count: x.len(),
        mean_x,
        var_x,
        s2x,
        null_mean: 1.0,
        null_variance,
        z,
        p_value,
        sidedness,
        null_model: null,
        level,
        decision,
        small_sample: x.len() < NORMAL_GUARD,
    })
}

/// Demeaned mean square `(1/MN) sum (H - mean)^2`.
pub fn sample_variance(field: &FieldSample) -> f64 {
    let n = field.values.len() as f64;
    let mean = field.values.iter().sum::<f64>() / n;
    field.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMethod {
    FullCovariance,
    BlurredLikelihood,
    FullLikelihood,
}

impl BiasMethod {
    pub const ALL: [BiasMethod; 3] = [Self::FullCovariance, Self::BlurredLikelihood, Self::FullLikelihood];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FullCovariance => "full-covariance",
            Self::BlurredLikelihood => "blurred-likelihood",
            Self::FullLikelihood => "full-likelihood",
        }
    }
}

impl std::str::FromStr for BiasMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bias method `{s}`")))
    }
}

/// `<s2> = C(0) - (1/(MN)^2) sum_y (M - |m'|)(N - |n'|) C(m', n')` for any stationary covariance.
pub fn full_covariance_expected_variance(spec: &GridSpec, cov: impl Fn(usize, usize) -> f64) -> f64 {
    let (m, n) = (spec.m, spec.n);
    let mut acc = 0.0;
    for np in 0..n {
        for mp in 0..m {
            let mult = if np > 0 { 2.0 } else { 1.0 } * if mp > 0 { 2.0 } else { 1.0 };
            acc += mult * ((m - mp) * (n - np)) as f64 * cov(mp, np);
        }
    }
    let cells = spec.cells() as f64;
    cov(0, 0) - acc / (cells * cells)
}

/// Predicted expectation of the sample variance.
pub fn sample_variance_bias(theta: &MaternParams, spec: &GridSpec, method: BiasMethod) -> Result<f64> {
    theta.validate()?;
    spec.validate()?;
    let cells = spec.cells() as f64;
    Ok(match method {
        BiasMethod::FullCovariance => full_covariance_expected_variance(spec, |mp, np| {
            covariance_unchecked(theta, (mp as f64 * spec.dx).hypot(np as f64 * spec.dy))
        }),
        BiasMethod::BlurredLikelihood => {
            let sdf = Blurrer::new(&Window::unit(spec)).sdf(theta)?;
            let s0 = sdf.values[spec.zero_index()];
            theta.sigma2 - (2.0 * PI).powi(2) * s0 / (cells * spec.dx * spec.dy)
        }
        BiasMethod::FullLikelihood => {
            let s0 = theta.sigma2 * fluctuation_scale(theta);
            theta.sigma2 - (2.0 * PI).powi(2) * s0 / (cells * spec.dx * spec.dy)
        }
    })
}

/// Window-weighted lag sum `sum_y W(y) C(y)` used by the blurred predictor, exposed for checks.
pub fn lag_weighted_covariance_sum(theta: &MaternParams, w: &Window) -> f64 {
    let spec = *w.spec();
    let wa = window_autocorrelation(w);
    let (m, n) = (spec.m as isize, spec.n as isize);
    let mut acc = 0.0;
    for np in -(n - 1)..n {
        for mp in -(m - 1)..m {
            acc += wa.at(mp, np) * covariance_unchecked(theta, wa.lags.distance(mp, np));
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reference {
    /// Chi-squared with two degrees of freedom.
    ChiSquared2,
    /// `chi2_2 / 2`, the null law of `X`.
    HalfChiSquared2,
    Normal { mean: f64, variance: f64 },
}

impl Reference {
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Self::ChiSquared2 => -2.0 * (-p).ln_1p(),
            Self::HalfChiSquared2 => -(-p).ln_1p(),
            Self::Normal { mean, variance } => mean + variance.sqrt() * Normal::standard().inverse_cdf(p),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match *self {
            Self::ChiSquared2 => {
                if x < 0.0 {
                    0.0
                } else {
                    0.5 * (-x / 2.0).exp()
                }
            }
            Self::HalfChiSquared2 => {
                if x < 0.0 {
                    0.0
                } else {
                    (-x).exp()
                }
            }
            Self::Normal { mean, variance } => {
                (-(x - mean).powi(2) / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Self::ChiSquared2 => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-x / 2.0).exp_m1()
                }
            }
            Self::HalfChiSquared2 => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-x).exp_m1()
                }
            }
            Self::Normal { mean, variance } => Normal::standard().cdf((x - mean) / variance.sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Empirical density (count / (n * width)).
    pub density: f64,
    /// Reference density at the bin center.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionProducts {
    pub histogram: Vec<HistogramBin>,
    /// `(theoretical, empirical)` pairs at plotting positions `(i - 0.5)/n`.
    pub qq: Vec<(f64, f64)>,
    /// Kolmogorov-Smirnov distance to the reference.
    pub ks_distance: f64,
}

pub fn distribution_products(samples: &[f64], reference: Reference, bins: usize) -> Result<DistributionProducts> {
    let mut sorted: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(Error::InvalidArgument("no finite samples".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let qq: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (reference.quantile((i as f64 + 0.5) / n as f64), *v))
        .collect();
    let ks_distance = sorted.iter().enumerate().fold(0.0f64, |d, (i, v)| {
        let f = reference.cdf(*v);
        d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs())
    });
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &sorted {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| {
            let lower = lo + b as f64 * width;
            let upper = lower + width;
            HistogramBin {
                lower,
                upper,
                count,
                density: count as f64 / (n as f64 * width),
                reference: reference.density(0.5 * (lower + upper)),
            }
        })
        .collect();
    Ok(DistributionProducts { histogram, qq, ks_distance })
}
