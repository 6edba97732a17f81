//! Maximization of the blurred likelihood in log-parameter space, with
//! preprocessing, multi-start and the sandwich uncertainty report.

use crate::diagnostics::{model_test, residuals, sample_variance, NullModel, ResidualReport, Sidedness};
use crate::error::{Error, Result};
use crate::grid::{detrend, winsorize, DetrendMode, FieldSample, GridSpec, Window, WindowKind};
use crate::likelihood::{LikelihoodContext, MaskSpec, Matrix3, Vector3};
use crate::matern::MaternParams;
use crate::optim::{bfgs, finite_difference_gradient, OptimConfig, OptimOutcome, TraceEntry};
use crate::simulator::{stream_rng, StreamPurpose};
use crate::uncertainty::{
    confidence_intervals, correlation_matrix, sandwich_covariance, score_covariance, ConfidenceInterval,
    ScoreCovMethod,
};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Analytic blurred score.
    #[default]
    Analytic,
    /// Central differences of the likelihood.
    FiniteDifference,
}

/// Taper applied by [`fit_field`]; [`fit`] takes its window explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaperSpec {
    #[default]
    None,
    Cosine { fraction: f64 },
}

impl TaperSpec {
    pub fn window(&self, spec: &GridSpec) -> Result<Window> {
        match *self {
            Self::None => Ok(Window::unit(spec)),
            Self::Cosine { fraction } => Window::cosine_taper(spec, fraction),
        }
    }
}

impl std::str::FromStr for TaperSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::None);
        }
        let f = s
            .strip_prefix("cosine:")
            .ok_or_else(|| Error::InvalidArgument(format!("unknown taper `{s}` (none, cosine:F)")))?;
        let fraction: f64 = f.parse().map_err(|_| Error::InvalidArgument(format!("bad taper fraction `{f}`")))?;
        if !(fraction > 0.0 && fraction < 0.5) {
            return Err(Error::InvalidArgument(format!("taper fraction must lie in (0, 0.5), got {fraction}")));
        }
        Ok(Self::Cosine { fraction })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Starting point; `None` uses [`initial_guess`].
    pub init: Option<MaternParams>,
    pub detrend: DetrendMode,
    /// Percentile bounds applied before detrending.
    pub winsorize: Option<(f64, f64)>,
    pub taper: TaperSpec,
    pub mask: MaskSpec,
    pub optim: OptimConfig,
    pub gradient: GradientMode,
    /// Perturbed restarts tried when the first run fails.
    pub restarts: usize,
    /// Log-space standard deviation of restart perturbations.
    pub restart_spread: f64,
    /// Largest smoothness the optimizer may visit; beyond it the model is numerically Gaussian
    /// and the likelihood is flat in `nu`.
    #[serde(default = "default_nu_max")]
    pub nu_max: f64,
    pub uq: ScoreCovMethod,
    pub level: f64,
    pub sidedness: Sidedness,
    pub seed: u64,
}

fn default_nu_max() -> f64 {
    100.0
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            init: None,
            detrend: DetrendMode::None,
            winsorize: None,
            taper: TaperSpec::None,
            mask: MaskSpec::all(),
            optim: OptimConfig::default(),
            gradient: GradientMode::Analytic,
            restarts: 3,
            restart_spread: 0.5,
            nu_max: default_nu_max(),
            uq: ScoreCovMethod::PerDiagonal,
            level: 0.95,
            sidedness: Sidedness::TwoSided,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.grad_tol > 0.0 && o.step_tol > 0.0 && o.max_step > 0.0 && o.max_iter > 0) {
            return Err(Error::InvalidArgument("optimizer tolerances must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.restart_spread >= 0.0 && self.restart_spread.is_finite()) {
            return Err(Error::InvalidArgument("restart spread must be finite and nonnegative".into()));
        }
        if !(self.nu_max > 0.0 && self.nu_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("nu_max must be finite and positive, got {}", self.nu_max)));
        }
        if let Some(t) = &self.init {
            t.validate()?;
            if t.nu > self.nu_max {
                return Err(Error::Domain(format!("initial nu {} exceeds nu_max {}", t.nu, self.nu_max)));
            }
        }
        Ok(())
    }

    /// Significance `beta = 1 - level`.
    pub fn beta(&self) -> f64 {
        1.0 - self.level
    }
}

/// `sigma2 = s^2`, `nu = 1`, `rho = diagonal / 10`.
pub fn initial_guess(field: &FieldSample, spec: &GridSpec) -> Result<MaternParams> {
    spec.check_shape(field.values.dim())?;
    let s2 = sample_variance(field);
    let scale = field.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(s2 > (f64::EPSILON * scale).powi(2)) {
        return Err(Error::ZeroVariance);
    }
    MaternParams::new(s2, 1.0, spec.diagonal() / 10.0)
}

/// Winsorizes then detrends per `config`.
pub fn preprocess(field: &FieldSample, config: &FitConfig) -> Result<FieldSample> {
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("field contains non-finite values".into()));
    }
    let f = match config.winsorize {
        Some((lo, hi)) => winsorize(field, lo, hi)?,
        None => field.clone(),
    };
    detrend(&f, config.detrend)
}

/// Optimizer output without the uncertainty report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub theta_hat: MaternParams,
    pub initial: MaternParams,
    pub loglik: f64,
    /// `dLbar/dtheta` at the optimum.
    pub score: Vector3,
    /// `max |theta_i dLbar/dtheta_i|`, the log-space gradient norm.
    pub score_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    /// Starts tried, the first included.
    pub starts: usize,
    pub trace: Vec<TraceEntry>,
}

fn log_objective(
    ctx: &LikelihoodContext,
    mode: GradientMode,
    nu_max: f64,
) -> impl FnMut(&[f64; 3]) -> Option<(f64, [f64; 3])> + '_ {
    // Points above the smoothness ceiling are undefined, so line searches back off from it.
    let params = move |u: &[f64; 3]| {
        let t = MaternParams::new(u[0].exp(), u[1].exp(), u[2].exp()).ok()?;
        (t.nu <= nu_max).then_some(t)
    };
    let value = move |u: &[f64; 3]| -> Option<f64> { ctx.evaluate(&params(u)?).ok().map(|e| -e.loglik) };
    move |u: &[f64; 3]| {
        let t = params(u)?;
        let e = ctx.evaluate(&t).ok()?;
        let grad = match mode {
            GradientMode::Analytic => [-t.sigma2 * e.score[0], -t.nu * e.score[1], -t.rho * e.score[2]],
            GradientMode::FiniteDifference => finite_difference_gradient(&mut |v| value(v), u, 1e-6)?,
        };
        Some((-e.loglik, grad))
    }
}

fn run_once(ctx: &LikelihoodContext, start: &MaternParams, config: &FitConfig) -> Option<OptimOutcome> {
    let mut f = log_objective(ctx, config.gradient, config.nu_max);
    bfgs(&mut f, start.to_log().to_array(), &config.optim)
}

fn log_score_norm(theta: &MaternParams, score: &Vector3) -> f64 {
    let t = theta.to_array();
    (0..3).map(|i| (t[i] * score[i]).abs()).fold(0.0, f64::max)
}

/// Maximizes the blurred likelihood of `ctx` from `start`, restarting on failure.
pub fn estimate(ctx: &LikelihoodContext, start: &MaternParams, config: &FitConfig) -> Result<PointEstimate> {
    config.validate()?;
    start.validate()?;
    let u0 = start.to_log().to_array();
    let normal = Normal::new(0.0, config.restart_spread.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut best: Option<(OptimOutcome, usize)> = None;
    let mut starts = 0;
    for attempt in 0..=config.restarts {
        let init = if attempt == 0 {
            *start
        } else {
            let mut rng = stream_rng(config.seed, attempt as u64, StreamPurpose::Multistart);
            let u: [f64; 3] = std::array::from_fn(|i| u0[i] + normal.sample(&mut rng));
            match MaternParams::new(u[0].exp(), u[1].exp(), u[2].exp()) {
                Ok(t) => t,
                Err(_) => continue,
            }
        };
        starts += 1;
        let Some(out) = run_once(ctx, &init, config) else { continue };
        let better = match &best {
            None => true,
            Some((b, _)) => (out.converged && !b.converged) || (out.converged == b.converged && out.value < b.value),
        };
        if better {
            best = Some((out, attempt));
        }
        if best.as_ref().is_some_and(|(b, _)| b.converged) {
            break;
        }
    }
    let (out, _) = best.ok_or_else(|| Error::NonConvergence { iterations: 0, score_norm: f64::INFINITY })?;
    let theta_hat = MaternParams::new(out.x[0].exp(), out.x[1].exp(), out.x[2].exp())?;
    let e = ctx.evaluate(&theta_hat)?;
    let score_norm = log_score_norm(&theta_hat, &e.score);
    Ok(PointEstimate {
        theta_hat,
        initial: *start,
        loglik: e.loglik,
        score: e.score,
        score_norm,
        converged: out.converged && score_norm < config.optim.grad_tol,
        iterations: out.iterations,
        evaluations: out.evaluations,
        starts,
        trace: out.trace,
    })
}

/// Preprocesses `field`, builds the likelihood context and estimates, without uncertainty.
pub fn fit_point(field: &FieldSample, w: &Window, config: &FitConfig) -> Result<PointEstimate> {
    let f = preprocess(field, config)?;
    let start = match config.init {
        Some(t) => t,
        None => initial_guess(&f, &f.spec)?,
    };
    let ctx = LikelihoodContext::new(&f, w, config.mask)?;
    estimate(&ctx, &start, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: MaternParams,
    pub initial: MaternParams,
    pub loglik: f64,
    pub score: Vector3,
    pub score_norm: f64,
    pub fisher: Matrix3,
    pub score_covariance: Matrix3,
    /// Sandwich covariance of `(sigma2, nu, rho)`.
    pub cov_theta: Matrix3,
    pub std_errors: Vector3,
    pub correlation: Matrix3,
    pub level: f64,
    pub intervals: [ConfidenceInterval; 3],
    pub residual_test: ResidualReport,
    pub iterations: usize,
    pub evaluations: usize,
    pub starts: usize,
    pub trace: Vec<TraceEntry>,
    pub window: WindowKind,
    pub mask: MaskSpec,
    pub detrend: DetrendMode,
    pub winsorize: Option<(f64, f64)>,
    pub uq: ScoreCovMethod,
}

impl FitResult {
    /// Intervals at another level without refitting.
    pub fn confidence_intervals(&self, beta: f64) -> Result<[ConfidenceInterval; 3]> {
        confidence_intervals(&self.theta_hat, &self.cov_theta, beta)
    }
}

/// Full fit on the grid `spec` with taper `w`; non-convergence is an error.
pub fn fit(field: &FieldSample, w: &Window, spec: &GridSpec, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    spec.check_shape(field.values.dim())?;
    spec.check_shape(w.values().dim())?;
    if field.spec != *spec || w.spec() != spec {
        return Err(Error::InvalidArgument("field, window and grid specs differ".into()));
    }
    let f = preprocess(field, config)?;
    let start = match config.init {
        Some(t) => t,
        None => initial_guess(&f, spec)?,
    };
    let ctx = LikelihoodContext::new(&f, w, config.mask)?;
    let point = estimate(&ctx, &start, config)?;
    if !point.converged {
        return Err(Error::NonConvergence { iterations: point.iterations, score_norm: point.score_norm });
    }
    report(&ctx, point, w, config)
}

/// Fit building the window from `config.taper`.
pub fn fit_field(field: &FieldSample, config: &FitConfig) -> Result<FitResult> {
    let w = config.taper.window(&field.spec)?;
    fit(field, &w, &field.spec, config)
}

fn report(ctx: &LikelihoodContext, point: PointEstimate, w: &Window, config: &FitConfig) -> Result<FitResult> {
    let theta = point.theta_hat;
    let e = ctx.evaluate(&theta)?;
    let uq = match config.uq {
        ScoreCovMethod::Sampling { replicates, .. } => ScoreCovMethod::Sampling { replicates, seed: config.seed },
        other => other,
    };
    let sc = score_covariance(&theta, ctx, uq)?;
    let cov_theta = sandwich_covariance(&e.fisher, &sc.matrix)?;
    let std_errors: Vector3 = std::array::from_fn(|i| cov_theta[i][i].max(0.0).sqrt());
    let correlation = correlation_matrix(&cov_theta)?;
    let intervals = confidence_intervals(&theta, &cov_theta, config.beta())?;
    let residual_test = model_test(&residuals(&theta, ctx)?, config.level, config.sidedness, NullModel::Fitted)?;
    Ok(FitResult {
        theta_hat: theta,
        initial: point.initial,
        loglik: point.loglik,
        score: point.score,
        score_norm: point.score_norm,
        fisher: e.fisher,
        score_covariance: sc.matrix,
        cov_theta,
        std_errors,
        correlation,
        level: config.level,
        intervals,
        residual_test,
        iterations: point.iterations,
        evaluations: point.evaluations,
        starts: point.starts,
        trace: point.trace,
        window: w.kind(),
        mask: config.mask,
        detrend: config.detrend,
        winsorize: config.winsorize,
        uq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, SimConfig};
    use ndarray::Array2;

    #[test]
    fn initial_guess_rules() {
        let spec = GridSpec::square(64, 10.0).unwrap();
        let f = FieldSample::new(spec, Array2::from_shape_fn((64, 64), |(i, j)| ((i * 7 + j * 3) % 5) as f64)).unwrap();
        let g = initial_guess(&f, &spec).unwrap();
        assert!((g.rho - 640.0f64.hypot(640.0) / 10.0).abs() < 1e-12);
        assert!((g.rho - 90.5).abs() < 0.01);
        assert_eq!(g.nu, 1.0);
        assert!((g.sigma2 - sample_variance(&f)).abs() < 1e-15);
        let c = FieldSample::new(spec, Array2::from_elem((64, 64), 3.0)).unwrap();
        assert!(matches!(initial_guess(&c, &spec), Err(Error::ZeroVariance)));
    }

    #[test]
    fn taper_spec_parsing() {
        assert_eq!("none".parse::<TaperSpec>().unwrap(), TaperSpec::None);
        assert_eq!("cosine:0.10".parse::<TaperSpec>().unwrap(), TaperSpec::Cosine { fraction: 0.1 });
        assert!("cosine:0".parse::<TaperSpec>().is_err());
        assert!("hann".parse::<TaperSpec>().is_err());
    }

    #[test]
    fn fit_small_grid_reaches_stationary_point() {
        let spec = GridSpec::square(24, 1.0).unwrap();
        let theta = MaternParams::new(2.0, 1.0, 3.0).unwrap();
        let f = simulate(&theta, &spec, &SimConfig::circulant(5)).unwrap();
        let r = fit_field(&f, &FitConfig::default()).unwrap();
        assert!(r.score_norm < 1e-6);
        for i in 0..3 {
            assert!(r.intervals[i].lower <= r.intervals[i].upper);
            for j in 0..3 {
                assert!((r.cov_theta[i][j] - r.cov_theta[j][i]).abs() < 1e-12 * r.cov_theta[i][i].abs().max(1e-300));
            }
        }
        // Refitting from the optimum stays put.
        let cfg = FitConfig { init: Some(r.theta_hat), ..FitConfig::default() };
        let again = fit_point(&f, &Window::unit(&spec), &cfg).unwrap();
        let (a, b) = (r.theta_hat.to_array(), again.theta_hat.to_array());
        for i in 0..3 {
            assert!(((a[i] - b[i]) / a[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn finite_difference_mode_agrees_with_analytic() {
        let spec = GridSpec::square(20, 1.0).unwrap();
        let theta = MaternParams::new(1.0, 1.5, 2.0).unwrap();
        let f = simulate(&theta, &spec, &SimConfig::circulant(9)).unwrap();
        let w = Window::unit(&spec);
        let a = fit_point(&f, &w, &FitConfig::default()).unwrap();
        let cfg = FitConfig { gradient: GradientMode::FiniteDifference, ..FitConfig::default() };
        let b = fit_point(&f, &w, &cfg).unwrap();
        assert!(a.converged && b.converged);
        let (x, y) = (a.theta_hat.to_array(), b.theta_hat.to_array());
        for i in 0..3 {
            assert!(((x[i] - y[i]) / x[i]).abs() < 1e-4, "{x:?} {y:?}");
        }
    }

    #[test]
    fn transpose_invariance_on_square_grid() {
        let spec = GridSpec::square(20, 1.0).unwrap();
        let theta = MaternParams::new(1.0, 0.8, 2.5).unwrap();
        let f = simulate(&theta, &spec, &SimConfig::circulant(13)).unwrap();
        let ft = FieldSample::new(spec, f.values.t().to_owned()).unwrap();
        let w = Window::unit(&spec);
        let a = fit_point(&f, &w, &FitConfig::default()).unwrap().theta_hat.to_array();
        let b = fit_point(&ft, &w, &FitConfig::default()).unwrap().theta_hat.to_array();
        for i in 0..3 {
            assert!(((a[i] - b[i]) / a[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn smoothness_ceiling_bounds_the_search() {
        // A ring of pure sinusoids has no Matern fit and drives nu upward without limit.
        let spec = GridSpec::square(32, 1.0).unwrap();
        let k = 2.0 * std::f64::consts::PI * 6.0 / 32.0;
        let v = Array2::from_shape_fn((32, 32), |(i, j)| (k * j as f64).cos() + (k * i as f64).cos());
        let f = FieldSample::new(spec, v).unwrap();
        let cfg = FitConfig { nu_max: 20.0, restarts: 1, ..FitConfig::default() };
        let p = fit_point(&f, &Window::unit(&spec), &cfg).unwrap();
        assert!(p.theta_hat.nu <= 20.0, "{:?}", p.theta_hat);
        let bad = FitConfig { nu_max: f64::NAN, ..FitConfig::default() };
        assert!(bad.validate().is_err());
    }
}
