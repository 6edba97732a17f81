//! Lattice geometry, data windows and their autocorrelation, and field
//! preprocessing (detrending, winsorizing).
//!
//! Arrays are stored with shape `(n, m)`: rows run along `y`, columns along `x`.

use crate::error::{ensure_finite, Error, Result};
use crate::fft::fft2;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m: usize,
    pub n: usize,
    pub dx: f64,
    pub dy: f64,
}

impl GridSpec {
    pub fn new(m: usize, n: usize, dx: f64, dy: f64) -> Result<Self> {
        let g = Self { m, n, dx, dy };
        g.validate()?;
        Ok(g)
    }

    pub fn square(size: usize, spacing: f64) -> Result<Self> {
        Self::new(size, size, spacing, spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one pixel per axis, got {}x{}",
                self.m, self.n
            )));
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy)] {
            ensure_finite(name, v)?;
            if v <= 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Array shape `(rows, cols) = (n, m)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn cells(&self) -> usize {
        self.m * self.n
    }

    pub fn x(&self, ix: usize) -> f64 {
        ix as f64 * self.dx
    }

    pub fn y(&self, iy: usize) -> f64 {
        iy as f64 * self.dy
    }

    /// Length of the grid diagonal `sqrt((M dx)^2 + (N dy)^2)`.
    pub fn diagonal(&self) -> f64 {
        (self.m as f64 * self.dx).hypot(self.n as f64 * self.dy)
    }

    pub fn kx(&self, ix: usize) -> f64 {
        (ix as f64 - (self.m / 2) as f64) * 2.0 * PI / (self.m as f64 * self.dx)
    }

    pub fn ky(&self, iy: usize) -> f64 {
        (iy as f64 - (self.n / 2) as f64) * 2.0 * PI / (self.n as f64 * self.dy)
    }

    pub fn k_norm(&self, iy: usize, ix: usize) -> f64 {
        self.kx(ix).hypot(self.ky(iy))
    }

    /// Centered index of the zero wave vector, as `(iy, ix)`.
    pub fn zero_index(&self) -> (usize, usize) {
        (self.n / 2, self.m / 2)
    }

    /// Centered index of `-k` for the wave vector at `(iy, ix)`.
    pub fn negated_index(&self, iy: usize, ix: usize) -> (usize, usize) {
        (neg_centered(iy, self.n), neg_centered(ix, self.m))
    }

    /// Smaller of the two Nyquist wavenumbers `pi/dx`, `pi/dy`.
    pub fn min_nyquist(&self) -> f64 {
        (PI / self.dx).min(PI / self.dy)
    }

    pub fn lag_grid(&self) -> LagGrid {
        LagGrid { m: self.m, n: self.n, dx: self.dx, dy: self.dy }
    }

    pub(crate) fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != self.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} (rows x cols)", self.n, self.m),
                got: format!("{}x{}", shape.0, shape.1),
            });
        }
        Ok(())
    }
}

/// Centered index `i` maps to offset `p = i - len/2`; returns the index of `-p` modulo `len`.
pub(crate) fn neg_centered(i: usize, len: usize) -> usize {
    let h = len / 2;
    let p = i as isize - h as isize;
    ((-p).rem_euclid(len as isize) as usize + h) % len
}

/// Wave vectors of the centered layout, one axis at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct WavenumberGrid {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
}

impl WavenumberGrid {
    pub fn norm(&self, iy: usize, ix: usize) -> f64 {
        self.kx[ix].hypot(self.ky[iy])
    }

    pub fn norms(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.ky.len(), self.kx.len()), |(iy, ix)| self.norm(iy, ix))
    }
}

pub fn wavenumber_grid(spec: &GridSpec) -> WavenumberGrid {
    WavenumberGrid {
        kx: (0..spec.m).map(|i| spec.kx(i)).collect(),
        ky: (0..spec.n).map(|i| spec.ky(i)).collect(),
    }
}

/// Mirrored lag indices `m' in [-(M-1), M-1]`, `n' in [-(N-1), N-1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagGrid {
    pub m: usize,
    pub n: usize,
    pub dx: f64,
    pub dy: f64,
}

impl LagGrid {
    pub fn shape(&self) -> (usize, usize) {
        (2 * self.n - 1, 2 * self.m - 1)
    }

    pub fn distance(&self, mp: isize, np: isize) -> f64 {
        (mp as f64 * self.dx).hypot(np as f64 * self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WindowKind {
    Unit,
    CosineTaper { fraction: f64 },
    Custom,
}

/// Real data window normalized so that `sum w^2 = M N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    spec: GridSpec,
    kind: WindowKind,
    values: Array2<f64>,
    // Per-axis factors for windows of the form wy[iy] * wx[ix].
    factors: Option<(Vec<f64>, Vec<f64>)>,
}

impl Window {
    pub fn unit(spec: &GridSpec) -> Self {
        Self::separable(spec, WindowKind::Unit, vec![1.0; spec.m], vec![1.0; spec.n])
    }

    pub fn cosine_taper(spec: &GridSpec, fraction: f64) -> Result<Self> {
        ensure_finite("fraction", fraction)?;
        if !(0.0..0.5).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "taper fraction must lie in [0, 0.5), got {fraction}"
            )));
        }
        if fraction == 0.0 {
            return Ok(Self::unit(spec));
        }
        let wx = taper_axis(spec.m, fraction);
        let wy = taper_axis(spec.n, fraction);
        Ok(Self::separable(spec, WindowKind::CosineTaper { fraction }, wx, wy))
    }

    /// Arbitrary nonnegative window (for instance a 0/1 mask), renormalized.
    pub fn custom(spec: &GridSpec, values: Array2<f64>) -> Result<Self> {
        spec.check_shape(values.dim())?;
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("window values must be finite and nonnegative".into()));
        }
        let energy: f64 = values.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(Error::InvalidArgument("window has no support".into()));
        }
        let scale = (spec.cells() as f64 / energy).sqrt();
        Ok(Self {
            spec: *spec,
            kind: WindowKind::Custom,
            values: values.mapv(|v| v * scale),
            factors: None,
        })
    }

    fn separable(spec: &GridSpec, kind: WindowKind, mut wx: Vec<f64>, mut wy: Vec<f64>) -> Self {
        normalize_axis(&mut wx);
        normalize_axis(&mut wy);
        let values = Array2::from_shape_fn(spec.shape(), |(iy, ix)| wy[iy] * wx[ix]);
        Self { spec: *spec, kind, values, factors: Some((wx, wy)) }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_unit(&self) -> bool {
        matches!(self.kind, WindowKind::Unit)
    }

    pub(crate) fn factors(&self) -> Option<(&[f64], &[f64])> {
        self.factors.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }
}

fn normalize_axis(w: &mut [f64]) {
    let e: f64 = w.iter().map(|v| v * v).sum();
    let s = (w.len() as f64 / e).sqrt();
    if s != 1.0 {
        w.iter_mut().for_each(|v| *v *= s);
    }
}

/// Rolloff of `ceil(fraction * len)` pixels per end with a `sin^2` ramp.
fn taper_axis(len: usize, fraction: f64) -> Vec<f64> {
    let r = (fraction * len as f64).ceil() as usize;
    (0..len)
        .map(|i| {
            let d = i.min(len - 1 - i);
            if d < r {
                (PI * (d as f64 + 0.5) / (2.0 * r as f64)).sin().powi(2)
            } else {
                1.0
            }
        })
        .collect()
}

/// Width in pixels of the taper rolloff on an axis of length `len`.
pub fn taper_rolloff_width(len: usize, fraction: f64) -> usize {
    (fraction * len as f64).ceil() as usize
}

pub fn cosine_squared_taper(spec: &GridSpec, fraction: f64) -> Result<Window> {
    Window::cosine_taper(spec, fraction)
}

/// `W(m', n') = sum_x w(x) w(x + y)` on the lag grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAutocorrelation {
    pub lags: LagGrid,
    /// Shape `(2N-1, 2M-1)`; entry `[n' + N - 1, m' + M - 1]`.
    pub values: Array2<f64>,
}

impl WindowAutocorrelation {
    pub fn at(&self, mp: isize, np: isize) -> f64 {
        let (m, n) = (self.lags.m as isize, self.lags.n as isize);
        self.values[[(np + n - 1) as usize, (mp + m - 1) as usize]]
    }
}

fn axis_autocorrelation(w: &[f64]) -> Vec<f64> {
    let len = w.len();
    (0..len).map(|lag| (0..len - lag).map(|i| w[i] * w[i + lag]).sum()).collect()
}

pub fn window_autocorrelation(w: &Window) -> WindowAutocorrelation {
    let spec = w.spec;
    let (m, n) = (spec.m, spec.n);
    let lags = spec.lag_grid();
    let values = match w.factors() {
        Some((wx, wy)) => {
            let ax = axis_autocorrelation(wx);
            let ay = axis_autocorrelation(wy);
            Array2::from_shape_fn(lags.shape(), |(j, i)| {
                ay[(j as isize - n as isize + 1).unsigned_abs()]
                    * ax[(i as isize - m as isize + 1).unsigned_abs()]
            })
        }
        None => {
            let full = padded_autocorrelation(w.values());
            Array2::from_shape_fn(lags.shape(), |(j, i)| {
                let jp = (j + n + 1) % (2 * n);
                let ip = (i + m + 1) % (2 * m);
                full[[jp, ip]]
            })
        }
    };
    WindowAutocorrelation { lags, values }
}

/// Circular autocorrelation of `w` zero-padded to `(2N, 2M)`; lag `(n', m')` at index `(n' mod 2N, m' mod 2M)`.
fn padded_autocorrelation(w: &Array2<f64>) -> Array2<f64> {
    let (n, m) = w.dim();
    let mut pad = Array2::<Complex64>::zeros((2 * n, 2 * m));
    for ((iy, ix), v) in w.indexed_iter() {
        pad[[iy, ix]] = Complex64::new(*v, 0.0);
    }
    let f = fft2(&pad, false).mapv(|c| Complex64::new(c.norm_sqr(), 0.0));
    let scale = 1.0 / (4 * n * m) as f64;
    fft2(&f, true).mapv(|c| c.re * scale)
}

/// `O((MN)^2)` reference for [`window_autocorrelation`].
pub fn window_autocorrelation_direct(w: &Window) -> WindowAutocorrelation {
    let spec = w.spec;
    let (m, n) = (spec.m as isize, spec.n as isize);
    let v = w.values();
    let lags = spec.lag_grid();
    let values = Array2::from_shape_fn(lags.shape(), |(j, i)| {
        let (np, mp) = (j as isize - n + 1, i as isize - m + 1);
        let mut s = 0.0;
        for iy in 0..n {
            for ix in 0..m {
                let (y2, x2) = (iy + np, ix + mp);
                if (0..n).contains(&y2) && (0..m).contains(&x2) {
                    s += v[[iy as usize, ix as usize]] * v[[y2 as usize, x2 as usize]];
                }
            }
        }
        s
    });
    WindowAutocorrelation { lags, values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Observed,
    Simulated { seed: u64, method: String },
}

/// Real field values `H(x)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub spec: GridSpec,
    pub values: Array2<f64>,
    pub units: String,
    pub provenance: Provenance,
}

impl FieldSample {
    pub fn new(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        spec.validate()?;
        spec.check_shape(values.dim())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field contains non-finite values".into()));
        }
        Ok(Self { spec, values, units: String::new(), provenance: Provenance::Observed })
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub(crate) fn map_values(&self, values: Array2<f64>) -> Self {
        Self { values, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetrendMode {
    #[default]
    None,
    Mean,
    Plane,
}

impl std::str::FromStr for DetrendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mean" => Ok(Self::Mean),
            "plane" => Ok(Self::Plane),
            other => Err(Error::InvalidArgument(format!("unknown detrend mode `{other}`"))),
        }
    }
}

/// Least-squares plane `a + b x + c y` in physical coordinates.
pub fn fit_plane(field: &FieldSample) -> Result<[f64; 3]> {
    let spec = field.spec;
    if spec.cells() < 3 || spec.m < 2 || spec.n < 2 {
        return Err(Error::InvalidArgument(format!(
            "plane detrending needs at least 2 pixels per axis, got {}x{}",
            spec.m, spec.n
        )));
    }
    // Center coordinates for conditioning; shift the intercept back afterwards.
    let xc = spec.x(spec.m - 1) / 2.0;
    let yc = spec.y(spec.n - 1) / 2.0;
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for ((iy, ix), v) in field.values.indexed_iter() {
        let row = Vector3::new(1.0, spec.x(ix) - xc, spec.y(iy) - yc);
        ata += row * row.transpose();
        atb += row * *v;
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("degenerate grid for plane fit".into()))?
        .solve(&atb);
    Ok([sol[0] - sol[1] * xc - sol[2] * yc, sol[1], sol[2]])
}

pub fn detrend(field: &FieldSample, mode: DetrendMode) -> Result<FieldSample> {
    match mode {
        DetrendMode::None => Ok(field.clone()),
        DetrendMode::Mean => {
            let mu = field.mean();
            Ok(field.map_values(field.values.mapv(|v| v - mu)))
        }
        DetrendMode::Plane => {
            let [a, b, c] = fit_plane(field)?;
            let spec = field.spec;
            let values = Array2::from_shape_fn(spec.shape(), |(iy, ix)| {
                field.values[[iy, ix]] - (a + b * spec.x(ix) + c * spec.y(iy))
            });
            Ok(field.map_values(values))
        }
    }
}

/// Percentile of sorted data, linear between order statistics at ranks `(i - 0.5)/n`.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let h = (pct / 100.0 * n as f64 + 0.5).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

pub fn winsorize(field: &FieldSample, lower_pct: f64, upper_pct: f64) -> Result<FieldSample> {
    ensure_finite("lower_pct", lower_pct)?;
    ensure_finite("upper_pct", upper_pct)?;
    if !(0.0 <= lower_pct && lower_pct < upper_pct && upper_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "winsorize bounds must satisfy 0 <= lower < upper <= 100, got ({lower_pct}, {upper_pct})"
        )));
    }
    let mut sorted: Vec<f64> = field.values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lower_pct);
    let hi = percentile(&sorted, upper_pct);
    Ok(field.map_values(field.values.mapv(|v| v.clamp(lo, hi))))
}
