//! Score covariance with full wavenumber correlation, and the sandwich
//! parameter covariance built from it.
//!
//! For a zero-mean Gaussian field the periodogram covariance is
//! `|E H(k) H*(k')|^2 + |E H(k) H(k')|^2`, and for a real field the second
//! (pseudo-covariance) term is `A(k, -k')` with `A(k, k') = E H(k) H*(k')`.

use crate::error::{Error, Result};
use crate::fft::{fft2, fft2_inplace, from_centered};
use crate::grid::{neg_centered, GridSpec, Window};
use crate::likelihood::{LikelihoodContext, MaskSpec, Matrix3};
use crate::matern::{covariance_unchecked, MaternParams};
use crate::simulator::{EmbeddingPolicy, SimConfig, SimMethod, Simulator};
use crate::spectral::{dft_normalization, field_periodogram, BlurredGradient, Blurrer};
use nalgebra::Matrix3 as NMatrix3;
use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest grid (in cells) accepted by the dense DFT-matrix route.
pub const DFT_MATRIX_CELL_LIMIT: usize = 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ScoreCovMethod {
    Sampling { replicates: usize, seed: u64 },
    DftMatrix,
    PerDiagonal,
}

impl std::str::FromStr for ScoreCovMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" | "per-diagonal" => Ok(Self::PerDiagonal),
            "dftmtx" | "dft-matrix" => Ok(Self::DftMatrix),
            other => match other.strip_prefix("sampling:") {
                Some(r) => {
                    let replicates = r
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad replicate count `{r}`")))?;
                    Ok(Self::Sampling { replicates, seed: 0 })
                }
                None => Err(Error::InvalidArgument(format!(
                    "unknown uncertainty method `{other}` (diagonal, dftmtx, sampling:R)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCovariance {
    pub matrix: Matrix3,
    pub method: ScoreCovMethod,
    /// Transforms (exact methods) or replicates (sampling) spent.
    pub effort: usize,
}

/// Dense `A(k, k') = E H(k) H*(k')` and `E H(k) H(k')`, rows and columns in centered order `iy * M + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodogramCovariance {
    pub spec: GridSpec,
    pub covariance: Array2<Complex64>,
    pub pseudo_covariance: Array2<Complex64>,
}

impl PeriodogramCovariance {
    /// `cov{|H(k)|^2, |H(k')|^2}`.
    pub fn periodogram_covariance(&self) -> Array2<f64> {
        let mut out = self.covariance.mapv(|z| z.norm_sqr());
        out.zip_mut_with(&self.pseudo_covariance, |o, p| *o += p.norm_sqr());
        out
    }

    /// Diagonal of the `|E H H*|^2` term on the centered wavenumber grid.
    pub fn covariance_term_diagonal(&self) -> Array2<f64> {
        self.diag_map(|i| self.covariance[[i, i]].norm_sqr())
    }

    /// Diagonal of the `|E H H|^2` term on the centered wavenumber grid.
    pub fn pseudo_term_diagonal(&self) -> Array2<f64> {
        self.diag_map(|i| self.pseudo_covariance[[i, i]].norm_sqr())
    }

    /// `var{|H(k)|^2}` on the centered grid, both terms included.
    pub fn variance(&self) -> Array2<f64> {
        let a = self.covariance_term_diagonal();
        &a + &self.pseudo_term_diagonal()
    }

    fn diag_map(&self, f: impl Fn(usize) -> f64) -> Array2<f64> {
        let m = self.spec.m;
        Array2::from_shape_fn(self.spec.shape(), |(iy, ix)| f(iy * m + ix))
    }
}

/// `mbar / Sbar`, zero outside the mask, in natural DFT order.
fn score_weights(g: &BlurredGradient, mask: &Array2<bool>) -> [Array2<f64>; 3] {
    std::array::from_fn(|a| {
        let mut w = &g.mbar[a] / &g.sdf.values;
        w.zip_mut_with(mask, |v, keep| {
            if !keep {
                *v = 0.0
            }
        });
        from_centered(&w)
    })
}

fn neg_bin(i: usize, len: usize) -> usize {
    (len - i) % len
}

fn quarter_covariance(theta: &MaternParams, spec: &GridSpec) -> Vec<f64> {
    (0..spec.n)
        .flat_map(|j| (0..spec.m).map(move |i| (i as f64 * spec.dx).hypot(j as f64 * spec.dy)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&r| covariance_unchecked(theta, r))
        .collect()
}

/// Source of the offset window autocorrelation `W(y, dk) = sum_x w(x) w(x+y) exp(-i dk.x)`.
enum OffsetWindow {
    Separable { x: Vec<Vec<Complex64>>, y: Vec<Vec<Complex64>> },
    General { padded: Array2<Complex64> },
}

fn axis_offset_table(w: &[f64]) -> Vec<Vec<Complex64>> {
    let len = w.len();
    (0..len)
        .map(|p| {
            (0..2 * len - 1)
                .map(|l| {
                    let lag = l as isize - len as isize + 1;
                    let mut s = Complex64::default();
                    for ix in 0..len as isize {
                        let j = ix + lag;
                        if (0..len as isize).contains(&j) {
                            let ph = -2.0 * std::f64::consts::PI * (p * ix as usize % len) as f64 / len as f64;
                            s += Complex64::from_polar(w[ix as usize] * w[j as usize], ph);
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

impl OffsetWindow {
    fn new(w: &Window) -> Self {
        match w.factors() {
            Some((wx, wy)) => Self::Separable { x: axis_offset_table(wx), y: axis_offset_table(wy) },
            None => {
                let (n, m) = w.values().dim();
                let mut pad = Array2::<Complex64>::zeros((2 * n, 2 * m));
                for (ij, v) in w.values().indexed_iter() {
                    pad[ij] = Complex64::new(*v, 0.0);
                }
                fft2_inplace(&mut pad, false);
                Self::General { padded: pad }
            }
        }
    }

    /// `W(y, dk)` on the lag grid, entry `[n' + N - 1, m' + M - 1]`, for offset bins `(py, px)`.
    fn lags(&self, spec: &GridSpec, py: usize, px: usize) -> Array2<Complex64> {
        let (m, n) = (spec.m, spec.n);
        match self {
            Self::Separable { x, y } => {
                Array2::from_shape_fn((2 * n - 1, 2 * m - 1), |(j, i)| y[py][j] * x[px][i])
            }
            Self::General { padded } => {
                let (rows, cols) = padded.dim();
                let prod = Array2::from_shape_fn((rows, cols), |(qy, qx)| {
                    let sy = (qy + rows - (2 * py) % rows) % rows;
                    let sx = (qx + cols - (2 * px) % cols) % cols;
                    padded[[qy, qx]] * padded[[sy, sx]].conj()
                });
                let r = fft2(&prod, true);
                let scale = 1.0 / (rows * cols) as f64;
                Array2::from_shape_fn((2 * n - 1, 2 * m - 1), |(j, i)| {
                    let jy = (j + n + 1) % rows;
                    let ix = (i + m + 1) % cols;
                    r[[jy, ix]] * scale
                })
            }
        }
    }
}

/// Per-offset `A(k, k - dk)` for every natural-order `k`, via one fold and transform.
struct DiagonalEngine<'a> {
    spec: GridSpec,
    offsets: OffsetWindow,
    cov: &'a [f64],
    c2: f64,
}

impl DiagonalEngine<'_> {
    fn diagonal(&self, py: usize, px: usize) -> Array2<Complex64> {
        let s = self.spec;
        let (m, n) = (s.m as isize, s.n as isize);
        let lags = self.offsets.lags(&s, py, px);
        let mut folded = Array2::<Complex64>::zeros(s.shape());
        for np in -(n - 1)..n {
            let row = np.rem_euclid(n) as usize;
            let qj = np.unsigned_abs() * s.m;
            for mp in -(m - 1)..m {
                let col = mp.rem_euclid(m) as usize;
                let wv = lags[[(np + n - 1) as usize, (mp + m - 1) as usize]];
                folded[[row, col]] += wv * self.cov[qj + mp.unsigned_abs()];
            }
        }
        fft2_inplace(&mut folded, false);
        folded.mapv_inplace(|z| z * self.c2);
        folded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerDiagonalOptions {
    /// Skip offsets whose `sum |W(y, dk)|` falls below this fraction of the largest; `None` is exact.
    pub truncation: Option<f64>,
}

fn accumulate_pair(
    acc: &mut Matrix3,
    weights: &[Array2<f64>; 3],
    (ky, kx): (usize, usize),
    (qy, qx): (usize, usize),
    (ny, nx): (usize, usize),
    mag2: f64,
) {
    let ak = [weights[0][[ky, kx]], weights[1][[ky, kx]], weights[2][[ky, kx]]];
    if ak.iter().all(|v| *v == 0.0) {
        return;
    }
    let bk: [f64; 3] = std::array::from_fn(|b| weights[b][[qy, qx]] + weights[b][[ny, nx]]);
    for a in 0..3 {
        for b in 0..3 {
            acc[a][b] += ak[a] * bk[b] * mag2;
        }
    }
}

fn finish(acc: Matrix3, cells: usize) -> Matrix3 {
    let s = 1.0 / (cells as f64 * cells as f64);
    let mut out = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            out[a][b] = 0.5 * (acc[a][b] + acc[b][a]) * s;
        }
    }
    out
}

fn add3(mut a: Matrix3, b: Matrix3) -> Matrix3 {
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] += b[i][j];
        }
    }
    a
}

fn per_diagonal_impl(
    theta: &MaternParams,
    blurrer: &Blurrer,
    mask: &Array2<bool>,
    opts: &PerDiagonalOptions,
) -> Result<ScoreCovariance> {
    let spec = *blurrer.spec();
    let g = blurrer.sdf_with_gradient(theta)?;
    let weights = score_weights(&g, mask);
    let cov = quarter_covariance(theta, &spec);
    let engine = DiagonalEngine { spec, offsets: OffsetWindow::new(blurrer.window()), cov: &cov, c2: dft_normalization(&spec).powi(2) };
    let (m, n) = (spec.m, spec.n);
    let mut offsets: Vec<(usize, usize)> = (0..n).flat_map(|py| (0..m).map(move |px| (py, px))).collect();
    if let Some(t) = opts.truncation {
        let masses: Vec<f64> = offsets
            .par_iter()
            .map(|&(py, px)| engine.offsets.lags(&spec, py, px).iter().map(|z| z.norm()).sum())
            .collect();
        let max_mass = masses.iter().copied().fold(0.0, f64::max);
        let mut order: Vec<usize> = (0..offsets.len()).collect();
        order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]));
        offsets = order.into_iter().filter(|&i| masses[i] >= t * max_mass).map(|i| offsets[i]).collect();
    }
    let acc = offsets
        .par_iter()
        .map(|&(py, px)| {
            let diag = engine.diagonal(py, px);
            let mut acc = [[0.0; 3]; 3];
            for ky in 0..n {
                let qy = (ky + n - py) % n;
                for kx in 0..m {
                    let qx = (kx + m - px) % m;
                    let mag2 = diag[[ky, kx]].norm_sqr();
                    accumulate_pair(&mut acc, &weights, (ky, kx), (qy, qx), (neg_bin(qy, n), neg_bin(qx, m)), mag2);
                }
            }
            acc
        })
        .reduce(|| [[0.0; 3]; 3], add3);
    Ok(ScoreCovariance { matrix: finish(acc, spec.cells()), method: ScoreCovMethod::PerDiagonal, effort: offsets.len() })
}


/// Dense `QB` with `B = diag(w) C diag(w)`: column `x'` is the scaled transform of `w(x) C(x - x') w(x')`.
fn transformed_covariance_columns(theta: &MaternParams, w: &Window) -> Array2<Complex64> {
    let spec = *w.spec();
    let (n, m) = spec.shape();
    let cells = spec.cells();
    let cov = quarter_covariance(theta, &spec);
    let wv = w.values();
    let c = dft_normalization(&spec);
    let cols: Vec<Vec<Complex64>> = (0..cells)
        .into_par_iter()
        .map(|col| {
            let (jy, jx) = (col / m, col % m);
            let wj = wv[[jy, jx]];
            let mut img = Array2::from_shape_fn((n, m), |(iy, ix)| {
                let q = iy.abs_diff(jy) * m + ix.abs_diff(jx);
                Complex64::new(wv[[iy, ix]] * cov[q] * wj, 0.0)
            });
            fft2_inplace(&mut img, false);
            img.iter().map(|z| z * c).collect()
        })
        .collect();
    Array2::from_shape_fn((cells, cells), |(k, col)| cols[col][k])
}

/// Rows of `A` and of the pseudo-covariance for natural-order `k`, as natural-order images over `k'`.
fn dft_rows(qb: &Array2<Complex64>, spec: &GridSpec, k: usize) -> (Array2<Complex64>, Array2<Complex64>) {
    let c = dft_normalization(spec);
    let row = Array2::from_shape_fn(spec.shape(), |(iy, ix)| qb[[k, iy * spec.m + ix]]);
    let pseudo = fft2(&row, false).mapv(|z| z * c);
    let cov = fft2(&row.mapv(|z| z.conj()), false).mapv(|z| (z * c).conj());
    (cov, pseudo)
}

fn check_dense_size(spec: &GridSpec) -> Result<()> {
    if spec.cells() > DFT_MATRIX_CELL_LIMIT {
        return Err(Error::SizeGuard { cells: spec.cells(), limit: DFT_MATRIX_CELL_LIMIT });
    }
    Ok(())
}

fn dft_matrix_impl(theta: &MaternParams, blurrer: &Blurrer, mask: &Array2<bool>) -> Result<ScoreCovariance> {
    let spec = *blurrer.spec();
    check_dense_size(&spec)?;
    let g = blurrer.sdf_with_gradient(theta)?;
    let weights = score_weights(&g, mask);
    let qb = transformed_covariance_columns(theta, blurrer.window());
    let (n, m) = spec.shape();
    let acc = (0..spec.cells())
        .into_par_iter()
        .map(|k| {
            let (ky, kx) = (k / m, k % m);
            let mut acc = [[0.0; 3]; 3];
            let ak = [weights[0][[ky, kx]], weights[1][[ky, kx]], weights[2][[ky, kx]]];
            if ak.iter().all(|v| *v == 0.0) {
                return acc;
            }
            let (cov, pseudo) = dft_rows(&qb, &spec, k);
            for qy in 0..n {
                for qx in 0..m {
                    let mag2 = cov[[qy, qx]].norm_sqr() + pseudo[[qy, qx]].norm_sqr();
                    for a in 0..3 {
                        for b in 0..3 {
                            acc[a][b] += ak[a] * weights[b][[qy, qx]] * mag2;
                        }
                    }
                }
            }
            acc
        })
        .reduce(|| [[0.0; 3]; 3], add3);
    Ok(ScoreCovariance { matrix: finish(acc, spec.cells()), method: ScoreCovMethod::DftMatrix, effort: 3 * spec.cells() })
}

fn flat_centered(spec: &GridSpec, bin_y: usize, bin_x: usize) -> usize {
    let cy = (bin_y + spec.n / 2) % spec.n;
    let cx = (bin_x + spec.m / 2) % spec.m;
    cy * spec.m + cx
}

/// Dense periodogram covariance terms by the DFT-matrix route.
pub fn periodogram_covariance_dft_matrix(theta: &MaternParams, w: &Window) -> Result<PeriodogramCovariance> {
    let spec = *w.spec();
    check_dense_size(&spec)?;
    theta.validate()?;
    let qb = transformed_covariance_columns(theta, w);
    let cells = spec.cells();
    let mut cov = Array2::<Complex64>::zeros((cells, cells));
    let mut pseudo = Array2::<Complex64>::zeros((cells, cells));
    for k in 0..cells {
        let (c, p) = dft_rows(&qb, &spec, k);
        let row = flat_centered(&spec, k / spec.m, k % spec.m);
        for ((qy, qx), v) in c.indexed_iter() {
            let col = flat_centered(&spec, qy, qx);
            cov[[row, col]] = *v;
            pseudo[[row, col]] = p[[qy, qx]];
        }
    }
    Ok(PeriodogramCovariance { spec, covariance: cov, pseudo_covariance: pseudo })
}

/// Dense periodogram covariance terms assembled diagonal by diagonal.
pub fn periodogram_covariance_per_diagonal(theta: &MaternParams, w: &Window) -> Result<PeriodogramCovariance> {
    let spec = *w.spec();
    check_dense_size(&spec)?;
    theta.validate()?;
    let quarter = quarter_covariance(theta, &spec);
    let engine = DiagonalEngine { spec, offsets: OffsetWindow::new(w), cov: &quarter, c2: dft_normalization(&spec).powi(2) };
    let (n, m) = spec.shape();
    let cells = spec.cells();
    let mut cov = Array2::<Complex64>::zeros((cells, cells));
    for py in 0..n {
        for px in 0..m {
            let d = engine.diagonal(py, px);
            for ky in 0..n {
                for kx in 0..m {
                    let (qy, qx) = ((ky + n - py) % n, (kx + m - px) % m);
                    cov[[flat_centered(&spec, ky, kx), flat_centered(&spec, qy, qx)]] = d[[ky, kx]];
                }
            }
        }
    }
    // E H(k) H(k') = A(k, -k').
    let pseudo = Array2::from_shape_fn((cells, cells), |(r, c)| {
        let (iy, ix) = (c / m, c % m);
        cov[[r, neg_centered(iy, n) * m + neg_centered(ix, m)]]
    });
    Ok(PeriodogramCovariance { spec, covariance: cov, pseudo_covariance: pseudo })
}

fn sampling_impl(
    theta: &MaternParams,
    ctx: &LikelihoodContext,
    replicates: usize,
    seed: u64,
) -> Result<ScoreCovariance> {
    if replicates < 2 {
        return Err(Error::InvalidArgument("sampling needs at least 2 replicates".into()));
    }
    let spec = *ctx.spec();
    let g = ctx.blurrer().sdf_with_gradient(theta)?;
    let cfg = SimConfig { method: SimMethod::Circulant, seed, embedding: EmbeddingPolicy::ClipEigenvalues, ..SimConfig::default() };
    let sim = Simulator::new(theta, &spec, &cfg)?;
    let w = ctx.blurrer().window();
    let mask = ctx.mask();
    let inv_mn = 1.0 / spec.cells() as f64;
    let scores: Vec<[f64; 3]> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<[f64; 3]> {
            let field = sim.replicate(r);
            let p = field_periodogram(&field, w)?;
            let mut s = [0.0; 3];
            for (ij, keep) in mask.indexed_iter() {
                if *keep {
                    let bracket = 1.0 - p[ij] / g.sdf.values[ij];
                    for a in 0..3 {
                        s[a] -= inv_mn * g.mbar[a][ij] * bracket;
                    }
                }
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(ScoreCovariance {
        matrix: sample_covariance(&scores),
        method: ScoreCovMethod::Sampling { replicates, seed },
        effort: replicates,
    })
}

/// Unbiased sample covariance of 3-vectors.
pub fn sample_covariance(xs: &[[f64; 3]]) -> Matrix3 {
    let r = xs.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|a| xs.iter().map(|x| x[a]).sum::<f64>() / r);
    let mut c = [[0.0; 3]; 3];
    for x in xs {
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    c.iter_mut().flatten().for_each(|v| *v /= r - 1.0);
    c
}

/// Score covariance at `theta` for the window and mask of `ctx`.
pub fn score_covariance(theta: &MaternParams, ctx: &LikelihoodContext, method: ScoreCovMethod) -> Result<ScoreCovariance> {
    match method {
        ScoreCovMethod::PerDiagonal => per_diagonal_impl(theta, ctx.blurrer(), ctx.mask(), &PerDiagonalOptions::default()),
        ScoreCovMethod::DftMatrix => dft_matrix_impl(theta, ctx.blurrer(), ctx.mask()),
        ScoreCovMethod::Sampling { replicates, seed } => sampling_impl(theta, ctx, replicates, seed),
    }
}

fn full_mask(spec: &GridSpec) -> Array2<bool> {
    MaskSpec::all().build(spec)
}

pub fn score_cov_per_diagonal(theta0: &MaternParams, w: &Window, spec: &GridSpec) -> Result<ScoreCovariance> {
    score_cov_per_diagonal_with(theta0, w, spec, &PerDiagonalOptions::default())
}

pub fn score_cov_per_diagonal_with(
    theta0: &MaternParams,
    w: &Window,
    spec: &GridSpec,
    opts: &PerDiagonalOptions,
) -> Result<ScoreCovariance> {
    spec.check_shape(w.values().dim())?;
    per_diagonal_impl(theta0, &Blurrer::new(w), &full_mask(spec), opts)
}

pub fn score_cov_dft_matrix(theta0: &MaternParams, w: &Window, spec: &GridSpec) -> Result<ScoreCovariance> {
    spec.check_shape(w.values().dim())?;
    dft_matrix_impl(theta0, &Blurrer::new(w), &full_mask(spec))
}

pub fn score_cov_sampling(
    theta0: &MaternParams,
    w: &Window,
    spec: &GridSpec,
    replicates: usize,
    seed: u64,
) -> Result<ScoreCovariance> {
    spec.check_shape(w.values().dim())?;
    let ctx = LikelihoodContext::from_periodogram(Array2::zeros(spec.shape()), w, MaskSpec::all())?;
    sampling_impl(theta0, &ctx, replicates, seed)
}

fn to_na(m: &Matrix3) -> NMatrix3<f64> {
    NMatrix3::from_fn(|i, j| m[i][j])
}

fn from_na(m: &NMatrix3<f64>) -> Matrix3 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// 2-norm condition number; infinite for a singular matrix.
pub fn condition_number(m: &Matrix3) -> f64 {
    let sv = to_na(m).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Condition numbers beyond this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// `F^-1 cov{gamma} F^-1`.
pub fn sandwich_covariance(fisher: &Matrix3, score_cov: &Matrix3) -> Result<Matrix3> {
    let cond = condition_number(fisher);
    if !(cond < MAX_CONDITION) {
        return Err(Error::SingularFisher { condition: cond });
    }
    let inv = to_na(fisher).try_inverse().ok_or(Error::SingularFisher { condition: cond })?;
    let c = inv * to_na(score_cov) * inv;
    let sym = (c + c.transpose()) * 0.5;
    Ok(from_na(&sym))
}

pub fn correlation_matrix(cov: &Matrix3) -> Result<Matrix3> {
    let d: [f64; 3] = std::array::from_fn(|i| cov[i][i]);
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(format!("covariance diagonal must be positive, got {d:?}")));
    }
    Ok(std::array::from_fn(|i| {
        std::array::from_fn(|j| if i == j { 1.0 } else { cov[i][j] / (d[i] * d[j]).sqrt() })
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    /// Zero standard error: the interval collapses to the estimate.
    pub degenerate: bool,
}

/// Two-sided normal quantile `z_{beta/2}` such that `P(|Z| > z) = beta`.
pub fn normal_half_width(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - beta / 2.0))
}

/// `theta_hat +- z_{beta/2} sqrt(cov_ii)`.
pub fn confidence_intervals(theta: &MaternParams, cov: &Matrix3, beta: f64) -> Result<[ConfidenceInterval; 3]> {
    let z = normal_half_width(beta)?;
    let est = theta.to_array();
    Ok(std::array::from_fn(|i| {
        let var = cov[i][i].max(0.0);
        let se = var.sqrt();
        ConfidenceInterval { estimate: est[i], std_error: se, lower: est[i] - z * se, upper: est[i] + z * se, degenerate: se == 0.0 }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::blurred_sdf;

    fn th(s: f64, n: f64, r: f64) -> MaternParams {
        MaternParams::new(s, n, r).unwrap()
    }

    #[test]
    fn single_pixel_variance_is_twice_sdf_squared() {
        let s = GridSpec::new(1, 1, 1.0, 1.0).unwrap();
        let w = Window::unit(&s);
        let t = th(1.3, 1.0, 2.0);
        let sdf = blurred_sdf(&t, &w, &s).unwrap().values[[0, 0]];
        for p in [periodogram_covariance_dft_matrix(&t, &w).unwrap(), periodogram_covariance_per_diagonal(&t, &w).unwrap()] {
            assert!((p.periodogram_covariance()[[0, 0]] - 2.0 * sdf * sdf).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_offset_zero_reproduces_blurred_sdf() {
        let s = GridSpec::new(5, 4, 1.0, 1.0).unwrap();
        let w = Window::cosine_taper(&s, 0.2).unwrap();
        let t = th(1.0, 0.5, 2.0);
        let p = periodogram_covariance_per_diagonal(&t, &w).unwrap();
        let sdf = blurred_sdf(&t, &w, &s).unwrap().values;
        for ((iy, ix), v) in sdf.indexed_iter() {
            let i = iy * 5 + ix;
            assert!((p.covariance[[i, i]].re - v).abs() < 1e-13);
            assert!(p.covariance[[i, i]].im.abs() < 1e-13);
        }
    }

    #[test]
    fn methods_agree_on_small_grid_with_mask() {
        let s = GridSpec::new(5, 4, 1.0, 1.5).unwrap();
        let mask = Array2::from_shape_fn((4, 5), |(i, j)| ((i + 2 * j) % 4 != 1) as u8 as f64);
        let w = Window::custom(&s, mask).unwrap();
        let t = th(1.0, 1.2, 2.0);
        let a = score_cov_per_diagonal(&t, &w, &s).unwrap().matrix;
        let b = score_cov_dft_matrix(&t, &w, &s).unwrap().matrix;
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() <= 1e-10 * a[i][i].abs().max(b[j][j].abs()), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn size_guard_refuses_large_dense_problems() {
        let s = GridSpec::square(65, 1.0).unwrap();
        let err = score_cov_dft_matrix(&th(1.0, 1.0, 1.0), &Window::unit(&s), &s).unwrap_err();
        assert!(matches!(err, Error::SizeGuard { .. }));
    }

    #[test]
    fn sandwich_and_correlation_examples() {
        let f = [[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]];
        let c = sandwich_covariance(&f, &f).unwrap();
        let inv = to_na(&f).try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - inv[(i, j)]).abs() < 1e-12);
            }
        }
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(correlation_matrix(&id).unwrap(), id);
        assert!(matches!(
            sandwich_covariance(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &id),
            Err(Error::SingularFisher { .. })
        ));
        assert!(correlation_matrix(&[[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn interval_examples() {
        assert!((normal_half_width(0.32).unwrap() - 0.994_457_883_209_753).abs() < 1e-9);
        let t = th(1.0, 2.0, 3.0);
        let cov = [[0.04, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let ci = confidence_intervals(&t, &cov, 0.05).unwrap();
        assert!((ci[0].upper - ci[0].lower - 2.0 * 1.959_963_984_540_054 * 0.2).abs() < 1e-12);
        assert!(ci[1].degenerate && ci[1].lower == ci[1].upper);
        assert!(ci.iter().all(|c| c.lower <= c.upper));
    }
}
