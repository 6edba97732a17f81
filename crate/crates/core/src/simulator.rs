//! Gaussian Matérn field simulation by blurred-spectral synthesis and by
//! circulant embedding of the covariance.

use crate::error::{Error, Result};
use crate::fft::{fft2_inplace, from_centered};
use crate::grid::{FieldSample, GridSpec, Provenance, Window};
use crate::matern::{covariance_unchecked, MaternParams};
use crate::spectral::{dft_normalization, Blurrer};
use ndarray::{s, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimMethod {
    Spectral,
    #[default]
    Circulant,
}

impl std::str::FromStr for SimMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Self::Spectral),
            "circulant" => Ok(Self::Circulant),
            other => Err(Error::InvalidArgument(format!("unknown simulation method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingPolicy {
    #[default]
    ErrorOnNegative,
    ClipEigenvalues,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub method: SimMethod,
    /// Per-axis enlargement of the synthesis grid for the spectral method.
    pub oversample: usize,
    pub seed: u64,
    pub embedding: EmbeddingPolicy,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { method: SimMethod::Circulant, oversample: 4, seed: 0, embedding: EmbeddingPolicy::ErrorOnNegative }
    }
}

impl SimConfig {
    pub fn spectral(seed: u64) -> Self {
        Self { method: SimMethod::Spectral, seed, ..Self::default() }
    }

    pub fn circulant(seed: u64) -> Self {
        Self { method: SimMethod::Circulant, seed, ..Self::default() }
    }
}

/// Purpose tags separating independent random streams under one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamPurpose {
    Field = 0,
    ScoreSampling = 1,
    Multistart = 2,
}

/// ChaCha20 stream keyed by `(seed, replicate, purpose)`.
pub fn stream_rng(seed: u64, replicate: u64, purpose: StreamPurpose) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((replicate << 8) | purpose as u64);
    rng
}

const MAX_PADDING: usize = 16;

/// Spectral-method synthesizer: `sqrt(Sbar)` on an enlarged unit-window grid.
#[derive(Debug, Clone)]
pub struct SpectralSynthesizer {
    spec: GridSpec,
    big: GridSpec,
    /// `sqrt(Sbar)/c` in natural DFT order on the enlarged grid.
    amplitude: Array2<f64>,
}

impl SpectralSynthesizer {
    pub fn new(theta: &MaternParams, spec: &GridSpec, oversample: usize) -> Result<Self> {
        theta.validate()?;
        spec.validate()?;
        if oversample == 0 {
            return Err(Error::InvalidArgument("oversample must be >= 1".into()));
        }
        let big = GridSpec::new(spec.m * oversample, spec.n * oversample, spec.dx, spec.dy)?;
        let sdf = Blurrer::new(&Window::unit(&big)).sdf(theta)?.values;
        let c = dft_normalization(&big);
        let amplitude = from_centered(&sdf).mapv(|s| s.max(0.0).sqrt() / c);
        Ok(Self { spec: *spec, big, amplitude })
    }

    /// Draws one field and returns it with the largest imaginary residue before discarding.
    pub fn sample_with_residue<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array2<f64>, f64) {
        let (rows, cols) = self.big.shape();
        let mut a = Array2::from_shape_simple_fn((rows, cols), || {
            Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0)
        });
        fft2_inplace(&mut a, false);
        let cells = self.big.cells() as f64;
        // Unit-variance Hermitian coefficients times sqrt(Sbar)/c, then inverse with 1/(M'N').
        let scale = 1.0 / (cells.sqrt() * cells);
        a.zip_mut_with(&self.amplitude, |z, amp| *z *= amp * scale);
        fft2_inplace(&mut a, true);
        let r0 = (rows - self.spec.n) / 2;
        let c0 = (cols - self.spec.m) / 2;
        let block = a.slice(s![r0..r0 + self.spec.n, c0..c0 + self.spec.m]);
        let residue = block.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        (block.mapv(|z| z.re), residue)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f64> {
        self.sample_with_residue(rng).0
    }
}

/// Circulant embedding of the covariance on a periodic `(pM) x (pN)` grid.
#[derive(Debug, Clone)]
pub struct CirculantEmbedding {
    spec: GridSpec,
    padding: usize,
    /// `sqrt(lambda / (P Q))`.
    amplitude: Array2<f64>,
    clipped_mass: f64,
}

impl CirculantEmbedding {
    pub fn new(theta: &MaternParams, spec: &GridSpec, policy: EmbeddingPolicy) -> Result<Self> {
        theta.validate()?;
        spec.validate()?;
        let mut padding = 2;
        loop {
            let (rows, cols) = (padding * spec.n, padding * spec.m);
            let mut base = Array2::<Complex64>::zeros((rows, cols));
            base.indexed_iter_mut().collect::<Vec<_>>().into_par_iter().for_each(|((i, j), v)| {
                let di = i.min(rows - i) as f64 * spec.dy;
                let dj = j.min(cols - j) as f64 * spec.dx;
                *v = Complex64::new(covariance_unchecked(theta, dj.hypot(di)), 0.0);
            });
            fft2_inplace(&mut base, false);
            let lambda = base.mapv(|z| z.re);
            let max = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
            let tol = 1e-10 * max;
            let last = padding >= MAX_PADDING;
            if min >= -tol || (last && policy == EmbeddingPolicy::ClipEigenvalues) {
                let total: f64 = lambda.iter().map(|l| l.abs()).sum();
                let clipped: f64 = lambda.iter().filter(|l| **l < 0.0).map(|l| -l).sum();
                let cells = (rows * cols) as f64;
                let amplitude = lambda.mapv(|l| (l.max(0.0) / cells).sqrt());
                return Ok(Self { spec: *spec, padding, amplitude, clipped_mass: clipped / total });
            }
            if last {
                return Err(Error::Embedding { min_eigenvalue: min, padding });
            }
            padding *= 2;
        }
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Fraction of absolute eigenvalue mass removed by clipping (zero when none was needed).
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    /// Draws two independent fields from the real and imaginary parts of one transform.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
        let mut a = self.amplitude.mapv(|amp| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * amp
        });
        fft2_inplace(&mut a, false);
        let block = a.slice(s![0..self.spec.n, 0..self.spec.m]);
        (block.mapv(|z| z.re), block.mapv(|z| z.im))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f64> {
        self.sample_pair(rng).0
    }
}

/// Prepared simulator reused across replicates.
#[derive(Debug, Clone)]
pub enum Simulator {
    Spectral(SpectralSynthesizer, SimConfig),
    Circulant(CirculantEmbedding, SimConfig),
}

impl Simulator {
    pub fn new(theta: &MaternParams, spec: &GridSpec, cfg: &SimConfig) -> Result<Self> {
        Ok(match cfg.method {
            SimMethod::Spectral => Self::Spectral(SpectralSynthesizer::new(theta, spec, cfg.oversample)?, *cfg),
            SimMethod::Circulant => Self::Circulant(CirculantEmbedding::new(theta, spec, cfg.embedding)?, *cfg),
        })
    }

    fn config(&self) -> &SimConfig {
        match self {
            Self::Spectral(_, c) | Self::Circulant(_, c) => c,
        }
    }

    fn spec(&self) -> GridSpec {
        match self {
            Self::Spectral(s, _) => s.spec,
            Self::Circulant(e, _) => e.spec,
        }
    }

    /// Replicate `r` drawn from its own stream of the master seed.
    pub fn replicate(&self, r: u64) -> FieldSample {
        let cfg = *self.config();
        let mut rng = stream_rng(cfg.seed, r, StreamPurpose::Field);
        let values = match self {
            Self::Spectral(s, _) => s.sample(&mut rng),
            Self::Circulant(e, _) => e.sample(&mut rng),
        };
        let method = match cfg.method {
            SimMethod::Spectral => "spectral",
            SimMethod::Circulant => "circulant",
        };
        FieldSample {
            spec: self.spec(),
            values,
            units: String::new(),
            provenance: Provenance::Simulated { seed: cfg.seed, method: format!("{method}/replicate-{r}") },
        }
    }
}

pub fn simulate_spectral(theta: &MaternParams, spec: &GridSpec, cfg: &SimConfig) -> Result<FieldSample> {
    let cfg = SimConfig { method: SimMethod::Spectral, ..*cfg };
    Ok(Simulator::new(theta, spec, &cfg)?.replicate(0))
}

pub fn simulate_circulant(theta: &MaternParams, spec: &GridSpec, cfg: &SimConfig) -> Result<FieldSample> {
    let cfg = SimConfig { method: SimMethod::Circulant, ..*cfg };
    Ok(Simulator::new(theta, spec, &cfg)?.replicate(0))
}

pub fn simulate(theta: &MaternParams, spec: &GridSpec, cfg: &SimConfig) -> Result<FieldSample> {
    Ok(Simulator::new(theta, spec, cfg)?.replicate(0))
}

/// `replicates` independent fields; member `r` uses stream `r` of the master seed.
pub fn simulate_batch(
    theta: &MaternParams,
    spec: &GridSpec,
    cfg: &SimConfig,
    replicates: usize,
) -> Result<Vec<FieldSample>> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("replicate count must be >= 1".into()));
    }
    let sim = Simulator::new(theta, spec, cfg)?;
    Ok((0..replicates as u64).into_par_iter().map(|r| sim.replicate(r)).collect())
}
