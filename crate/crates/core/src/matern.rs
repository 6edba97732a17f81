//! Isotropic two-dimensional Matérn model: spectral density, covariance,
//! their parameter derivatives, and the cumulative power distribution.
//!
//! The spectral density in 2-D is
//! `S(k) = sigma2 * (pi rho^2 / 4) * mu^(nu+1)` with
//! `mu = a / (a + k^2)` and `a = 4 nu / (pi^2 rho^2)`.

use crate::bessel::{bessel_k_integer_orders, bessel_k_ladder, bessel_k_order_derivative};
use crate::error::{ensure_finite, Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use std::f64::consts::{LN_2, PI};

/// Parameter triple `(sigma2, nu, rho)`: variance, smoothness, range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub nu: f64,
    pub rho: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, nu: f64, rho: f64) -> Result<Self> {
        let p = Self { sigma2, nu, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma2", self.sigma2), ("nu", self.nu), ("rho", self.rho)] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::Domain(format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.sigma2, self.nu, self.rho]
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    pub fn with_sigma2(self, sigma2: f64) -> Self {
        Self { sigma2, ..self }
    }

    /// `a = 4 nu / (pi^2 rho^2)`, the squared inverse length in the spectral density.
    pub fn spectral_scale(&self) -> f64 {
        4.0 * self.nu / (PI * PI * self.rho * self.rho)
    }

    pub fn to_log(self) -> LogParams {
        LogParams {
            log_sigma2: self.sigma2.ln(),
            log_nu: self.nu.ln(),
            log_rho: self.rho.ln(),
        }
    }
}

/// Unconstrained log-parameters used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogParams {
    pub log_sigma2: f64,
    pub log_nu: f64,
    pub log_rho: f64,
}

impl LogParams {
    pub fn from_array(v: [f64; 3]) -> Self {
        Self { log_sigma2: v[0], log_nu: v[1], log_rho: v[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.log_sigma2, self.log_nu, self.log_rho]
    }

    pub fn to_params(self) -> Result<MaternParams> {
        MaternParams::new(self.log_sigma2.exp(), self.log_nu.exp(), self.log_rho.exp())
    }
}

/// Auxiliary variable `mu = a / (a + k^2)`, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxMu(pub f64);

impl AuxMu {
    pub fn new(theta: &MaternParams, k: f64) -> Self {
        let a = theta.spectral_scale();
        AuxMu(a / (a + k * k))
    }
}

fn check_wavenumber(k: f64) -> Result<()> {
    ensure_finite("k", k)?;
    if k < 0.0 {
        return Err(Error::InvalidArgument(format!("wavenumber must be >= 0, got {k}")));
    }
    Ok(())
}

/// `S_theta(k)` at scalar wavenumber `k >= 0`.
pub fn spectral_density(theta: &MaternParams, k: f64) -> Result<f64> {
    theta.validate()?;
    check_wavenumber(k)?;
    Ok(spectral_density_unchecked(theta, k))
}

pub(crate) fn spectral_density_unchecked(theta: &MaternParams, k: f64) -> f64 {
    let a = theta.spectral_scale();
    let ln_mu = -(k * k / a).ln_1p();
    theta.sigma2 * PI * theta.rho * theta.rho / 4.0 * ((theta.nu + 1.0) * ln_mu).exp()
}

/// Fluctuation scale `S_theta(0) / sigma2 = pi rho^2 / 4`.
pub fn fluctuation_scale(theta: &MaternParams) -> f64 {
    PI * theta.rho * theta.rho / 4.0
}

/// Bessel argument `z = 2 sqrt(nu) r / (pi rho)`.
fn bessel_argument(nu: f64, rho: f64, r: f64) -> f64 {
    2.0 * nu.sqrt() * r / (PI * rho)
}

/// `ln` of the correlation `2^(1-nu)/Gamma(nu) z^nu K_nu(z)` plus `ln K` ladder reuse.
fn ln_correlation(nu: f64, z: f64, ln_k: f64) -> f64 {
    (1.0 - nu) * LN_2 - ln_gamma(nu) + nu * z.ln() + ln_k
}

/// `C_theta(r)` at lag distance `r >= 0`; `C_theta(0) = sigma2` by its analytic limit.
pub fn covariance(theta: &MaternParams, r: f64) -> Result<f64> {
    theta.validate()?;
    ensure_finite("r", r)?;
    if r < 0.0 {
        return Err(Error::InvalidArgument(format!("lag distance must be >= 0, got {r}")));
    }
    Ok(covariance_unchecked(theta, r))
}

pub(crate) fn covariance_unchecked(theta: &MaternParams, r: f64) -> f64 {
    if r == 0.0 {
        return theta.sigma2;
    }
    let z = bessel_argument(theta.nu, theta.rho, r);
    match bessel_k_ladder(theta.nu, z) {
        Ok(l) => theta.sigma2 * ln_correlation(theta.nu, z, l.ln_k()).exp(),
        Err(_) => f64::NAN,
    }
}

/// Cumulative power `P_theta(k) = 2 pi int_0^k S(k') k' dk'`.
pub fn power_distribution(theta: &MaternParams, k: f64) -> Result<f64> {
    theta.validate()?;
    check_wavenumber(k)?;
    let a = theta.spectral_scale();
    // 1 - (a/(a+k^2))^nu, written to keep precision for small k.
    let ln_mu = -(k * k / a).ln_1p();
    Ok(-theta.sigma2 * (theta.nu * ln_mu).exp_m1())
}

/// Wavenumber `k_alpha` at which the power reaches `alpha * sigma2`.
pub fn quantile_wavenumber(theta: &MaternParams, alpha: f64) -> Result<f64> {
    theta.validate()?;
    ensure_finite("alpha", alpha)?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "alpha must lie in [0, 1), got {alpha} (k_1 is infinite)"
        )));
    }
    let inner = (-(-alpha).ln_1p() / theta.nu).exp_m1();
    Ok(2.0 * theta.nu.sqrt() / (PI * theta.rho) * inner.sqrt())
}

/// Equivalent wavelength `lambda_{100 alpha} = 2 pi / k_alpha`.
pub fn quantile_wavelength(theta: &MaternParams, alpha: f64) -> Result<f64> {
    Ok(2.0 * PI / quantile_wavenumber(theta, alpha)?)
}

/// Logarithmic derivatives `m_theta(k) = S^-1 dS/dtheta`, ordered `(sigma2, nu, rho)`.
pub fn log_spectral_gradient(theta: &MaternParams, k: f64) -> Result<[f64; 3]> {
    theta.validate()?;
    check_wavenumber(k)?;
    Ok(log_spectral_gradient_unchecked(theta, k))
}

pub(crate) fn log_spectral_gradient_unchecked(theta: &MaternParams, k: f64) -> [f64; 3] {
    let MaternParams { sigma2, nu, rho } = *theta;
    let a = theta.spectral_scale();
    let mu = a / (a + k * k);
    let ln_mu = -(k * k / a).ln_1p();
    let c = (nu + 1.0) / nu;
    [
        1.0 / sigma2,
        c * (1.0 - mu) + ln_mu,
        -2.0 * nu / rho + 2.0 * (nu + 1.0) / rho * mu,
    ]
}

/// Symmetric matrix of derivatives `d m_theta' / d theta`.
pub fn spectral_gradient_hessian_terms(theta: &MaternParams, k: f64) -> Result<[[f64; 3]; 3]> {
    theta.validate()?;
    check_wavenumber(k)?;
    Ok(spectral_gradient_hessian_unchecked(theta, k))
}

pub(crate) fn spectral_gradient_hessian_unchecked(theta: &MaternParams, k: f64) -> [[f64; 3]; 3] {
    let MaternParams { sigma2, nu, rho } = *theta;
    let mu = AuxMu::new(theta, k).0;
    let c = (nu + 1.0) / nu;
    let ss = -1.0 / (sigma2 * sigma2);
    let nn = ((nu - 1.0) / nu - 2.0 * mu + c * mu * mu) / nu;
    let rr = 2.0 * nu / (rho * rho) * (1.0 - 3.0 * c * mu + 2.0 * c * mu * mu);
    let nr = 2.0 / rho * (-1.0 + (2.0 * nu + 1.0) / nu * mu - c * mu * mu);
    [[ss, 0.0, 0.0], [0.0, nn, nr], [0.0, nr, rr]]
}

/// Integer-order threshold for the analytic `dC/dnu` branch.
pub const INTEGER_NU_TOLERANCE: f64 = 1e-9;

/// `dC_theta(r)/d(sigma2, nu, rho)`; at `r = 0` the analytic limits `(1, 0, 0)`.
pub fn covariance_gradient(theta: &MaternParams, r: f64) -> Result<[f64; 3]> {
    theta.validate()?;
    ensure_finite("r", r)?;
    if r < 0.0 {
        return Err(Error::InvalidArgument(format!("lag distance must be >= 0, got {r}")));
    }
    Ok(covariance_with_gradient(theta, r).1)
}

/// Covariance and its gradient in one pass, sharing the Bessel ladder.
pub(crate) fn covariance_with_gradient(theta: &MaternParams, r: f64) -> (f64, [f64; 3]) {
    let MaternParams { sigma2, nu, rho } = *theta;
    if r == 0.0 {
        return (sigma2, [1.0, 0.0, 0.0]);
    }
    let z = bessel_argument(nu, rho, r);
    let ladder = match bessel_k_ladder(nu, z) {
        Ok(l) => l,
        Err(_) => return (f64::NAN, [f64::NAN; 3]),
    };
    let ln_corr = ln_correlation(nu, z, ladder.ln_k());
    let c = sigma2 * ln_corr.exp();
    // dC/drho = (sigma2/rho) 2^(1-nu)/Gamma(nu) z^(nu+1) K_{nu-1}(z)
    let d_rho = sigma2 / rho
        * ((1.0 - nu) * LN_2 - ln_gamma(nu) + (nu + 1.0) * z.ln() + ladder.ln_km1()).exp();
    let d_nu = covariance_nu_derivative(theta, r, z, c, &ladder);
    (c, [c / sigma2, d_nu, d_rho])
}

fn covariance_nu_derivative(
    theta: &MaternParams,
    r: f64,
    z: f64,
    c: f64,
    ladder: &crate::bessel::KLadder,
) -> f64 {
    let nu = theta.nu;
    let n = nu.round();
    if (nu - n).abs() < INTEGER_NU_TOLERANCE && n >= 1.0 {
        let n = n as usize;
        if let Ok(ks) = bessel_k_integer_orders(n, z) {
            let kn = ks[n];
            let dk = bessel_k_order_derivative(n, z, &ks);
            let ratio_km1 = ladder.km1 / ladder.k;
            let d = c
                * ((0.5 * z).ln() - digamma(n as f64) - z * ratio_km1 / (2.0 * n as f64)
                    + dk / kn);
            if d.is_finite() {
                return d;
            }
        }
    }
    // Central difference with the nu-proportional step eps^(1/3) nu.
    let h = f64::EPSILON.cbrt() * nu;
    let up = covariance_unchecked(&MaternParams { nu: nu + h, ..*theta }, r);
    let down = covariance_unchecked(&MaternParams { nu: nu - h, ..*theta }, r);
    (up - down) / (2.0 * h)
}
