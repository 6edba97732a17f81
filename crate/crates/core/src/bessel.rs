//! Modified Bessel function of the second kind, `K_nu(z)`, for real order.
//!
//! Temme's series is used for `z < 2` and Steed's continued fraction (CF2)
//! for `z >= 2`; both deliver `K_mu` and `K_{mu+1}` for `|mu| <= 1/2`, and
//! the forward recurrence climbs to the requested order. From order
//! `DEBYE_ORDER` up, the uniform asymptotic expansion in the order replaces
//! the recurrence so the cost does not grow with `nu`. Values are carried
//! with a separate log scale so that large orders at small arguments do not
//! overflow.

use crate::error::{Error, Result};
use std::f64::consts::PI;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const SERIES_LIMIT: f64 = 2.0;
const RESCALE: f64 = 1e200;
/// Truncating the uniform expansion after `u_4` leaves a relative error near `nu^-5`.
pub const DEBYE_ORDER: f64 = 200.0;

/// Coefficients of `1/Gamma(z) = sum_k c_k z^k` (Abramowitz & Stegun 6.1.34).
const RGAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877,
    0.007_218_943_246_663,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_51,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// `1/Gamma(1+x)` for `|x| <= 1/2`.
fn rgamma_1p(x: f64) -> f64 {
    RGAMMA.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Temme's auxiliary gamma quantities for `|mu| <= 1/2`:
/// `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))`.
fn temme_gamma(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    let mut gam1 = 0.0;
    let mut gam2 = 0.0;
    // gam1 collects the even-index coefficients, gam2 the odd-index ones.
    for (i, &c) in RGAMMA.iter().enumerate().rev() {
        if i % 2 == 1 {
            gam1 = gam1 * mu2 + c;
        } else {
            gam2 = gam2 * mu2 + c;
        }
    }
    (-gam1, gam2, rgamma_1p(mu), rgamma_1p(-mu))
}

/// `(K_mu, K_{mu+1}, ln_scale)` for `|mu| <= 1/2`, `z > 0`.
fn k_base_pair(mu: f64, z: f64) -> (f64, f64, f64) {
    let mu2 = mu * mu;
    let xi = 1.0 / z;
    if z < SERIES_LIMIT {
        let x2 = 0.5 * z;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gamma(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum, sum1 * 2.0 * xi, 0.0)
    } else {
        let mut b = 2.0 * (1.0 + z);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        // exp(-z) is carried in the log scale.
        let kmu = (PI / (2.0 * z)).sqrt() / s;
        let k1 = kmu * (mu + z + 0.5 - h) * xi;
        (kmu, k1, -z)
    }
}

/// Three consecutive orders `K_{nu-1}, K_nu, K_{nu+1}` sharing one log scale:
/// the true values are `value * exp(ln_scale)`.
#[derive(Debug, Clone, Copy)]
pub struct KLadder {
    pub km1: f64,
    pub k: f64,
    pub kp1: f64,
    pub ln_scale: f64,
}

impl KLadder {
    pub fn ln_k(&self) -> f64 {
        self.k.ln() + self.ln_scale
    }

    pub fn ln_km1(&self) -> f64 {
        self.km1.ln() + self.ln_scale
    }
}

fn check_args(nu: f64, z: f64) -> Result<()> {
    if !nu.is_finite() || !z.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bessel_k requires finite arguments, got nu={nu}, z={z}"
        )));
    }
    if z <= 0.0 {
        return Err(Error::Domain(format!("bessel_k requires z > 0, got {z}")));
    }
    Ok(())
}

/// `K_{nu-1}(z), K_nu(z), K_{nu+1}(z)` for real `nu` (orders are reflected, `K_{-v} = K_v`).
pub fn bessel_k_ladder(nu: f64, z: f64) -> Result<KLadder> {
    check_args(nu, z)?;
    let nu = nu.abs();
    if nu - 1.0 >= DEBYE_ORDER {
        let ln_k = ln_k_debye(nu, z);
        return Ok(KLadder {
            km1: (ln_k_debye(nu - 1.0, z) - ln_k).exp(),
            k: 1.0,
            kp1: (ln_k_debye(nu + 1.0, z) - ln_k).exp(),
            ln_scale: ln_k,
        });
    }
    Ok(ladder_by_recurrence(nu, z))
}

fn ladder_by_recurrence(nu: f64, z: f64) -> KLadder {
    let steps = (nu + 0.5).floor() as usize;
    let mu = nu - steps as f64;
    let (mut kmu, mut k1, mut ln_scale) = k_base_pair(mu, z);
    let two_over_z = 2.0 / z;
    let mut prev = f64::NAN;
    for i in 1..=steps {
        let next = (mu + i as f64) * two_over_z * k1 + kmu;
        prev = kmu;
        kmu = k1;
        k1 = next;
        if k1.abs() > RESCALE {
            prev /= RESCALE;
            kmu /= RESCALE;
            k1 /= RESCALE;
            ln_scale += RESCALE.ln();
        }
    }
    let km1 = if steps >= 1 {
        prev
    } else {
        // nu < 1/2: K_{nu-1} = K_{1-nu} is the upper member of the pair at order -nu.
        let (_, k_one_minus, s) = k_base_pair(-mu, z);
        k_one_minus * (s - ln_scale).exp()
    };
    KLadder { km1, k: kmu, kp1: k1, ln_scale }
}

/// `ln K_nu(z)` from the uniform expansion of `K_nu(nu x)` in powers of `1/nu`.
fn ln_k_debye(nu: f64, z: f64) -> f64 {
    let x = z / nu;
    let s = x.hypot(1.0);
    let t = 1.0 / s;
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 + t2 * (-462.0 + 385.0 * t2)) / 1152.0;
    let u3 = t * t2 * (30375.0 + t2 * (-369603.0 + t2 * (765765.0 - 425425.0 * t2))) / 414720.0;
    let u4 = t2
        * t2
        * (4465125.0 + t2 * (-94121676.0 + t2 * (349922430.0 + t2 * (-446185740.0 + 185910725.0 * t2))))
        / 39813120.0;
    let inv = 1.0 / nu;
    let series = 1.0 + inv * (-u1 + inv * (u2 + inv * (-u3 + inv * u4)));
    // eta = s + ln(x / (1 + s)); the log is split to stay finite for tiny x.
    let eta = s + x.ln() - s.ln_1p();
    0.5 * (PI / (2.0 * nu)).ln() - nu * eta - 0.5 * s.ln() + series.ln()
}

/// `K_nu(z)` for real order and `z > 0`.
pub fn bessel_k(nu: f64, z: f64) -> Result<f64> {
    let l = bessel_k_ladder(nu, z)?;
    Ok(l.k * l.ln_scale.exp())
}

/// `ln K_nu(z)`, finite even where `K_nu(z)` itself would overflow or underflow.
pub fn ln_bessel_k(nu: f64, z: f64) -> Result<f64> {
    Ok(bessel_k_ladder(nu, z)?.ln_k())
}

/// `K_0(z), ..., K_n(z)`.
pub fn bessel_k_integer_orders(n: usize, z: f64) -> Result<Vec<f64>> {
    check_args(0.0, z)?;
    let (k0, k1, ln_scale) = k_base_pair(0.0, z);
    let scale = ln_scale.exp();
    let mut out = Vec::with_capacity(n + 1);
    out.push(k0 * scale);
    if n >= 1 {
        out.push(k1 * scale);
    }
    for m in 1..n {
        let next = 2.0 * m as f64 / z * out[m] + out[m - 1];
        out.push(next);
    }
    Ok(out)
}

/// Order derivative `dK_nu/dnu` at integer `nu = n` (Abramowitz & Stegun 9.6.45),
/// given `K_0..K_n` at the same argument.
pub fn bessel_k_order_derivative(n: usize, z: f64, k_orders: &[f64]) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let half = 0.5 * z;
    let mut sum = 0.0;
    let mut fact_m = 1.0;
    for (m, &km) in k_orders.iter().enumerate().take(n) {
        if m > 0 {
            fact_m *= m as f64;
        }
        sum += half.powi(m as i32) * km / ((n - m) as f64 * fact_m);
    }
    let fact_n: f64 = (1..=n).map(|i| i as f64).product();
    0.5 * fact_n * half.powi(-(n as i32)) * sum
}
