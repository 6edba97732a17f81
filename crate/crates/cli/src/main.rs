use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use matern_whittle::diagnostics::{
    distribution_products, model_test, residuals, sample_variance, BiasMethod, NullModel, Reference, Sidedness,
};
use matern_whittle::estimator::{fit, preprocess, FitConfig, GradientMode, TaperSpec};
use matern_whittle::grid::DetrendMode;
use matern_whittle::io::{bias_table, read_grid, write_grid, InputProvenance, NonFinitePolicy, ResultFile};
use matern_whittle::optim::OptimConfig;
use matern_whittle::likelihood::{LikelihoodContext, MaskShape, MaskSpec};
use matern_whittle::simulator::{simulate, EmbeddingPolicy, SimConfig, SimMethod};
use matern_whittle::uncertainty::{ScoreCovMethod, DFT_MATRIX_CELL_LIMIT};
use matern_whittle::{Error, GridSpec, MaternParams};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "whittle", version, about = "Debiased Whittle estimation of Matérn random fields")]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, env = "WHITTLE_THREADS", default_value_t = 0)]
    threads: usize,
    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate (sigma2, nu, rho) with sandwich uncertainties and the residual test.
    Fit(FitArgs),
    /// Generate a Matérn field.
    Simulate(SimulateArgs),
    /// Residual diagnostics for a given or previously fitted model.
    Test(TestArgs),
    /// Predicted sample-variance bias versus grid size.
    BiasPredict(BiasArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Payload: raw little-endian f64, or CSV when the extension is .csv.
    #[arg(long)]
    input: PathBuf,
    /// JSON header; defaults to the input path with `.json` appended.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Treat non-finite pixels as missing instead of failing.
    #[arg(long)]
    mask_nonfinite: bool,
}

#[derive(Args)]
struct Preprocess {
    #[arg(long, default_value = "mean")]
    detrend: DetrendMode,
    /// none, or cosine:F with 0 < F < 0.5.
    #[arg(long, default_value = "none")]
    taper: TaperSpec,
    /// Wavenumber mask: all or disk.
    #[arg(long, default_value = "all")]
    mask: MaskShape,
    /// Keep the zero wavenumber even after detrending.
    #[arg(long)]
    keep_zero: bool,
    /// Percentile bounds `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    winsorize: Option<(f64, f64)>,
}

impl Preprocess {
    fn mask_spec(&self) -> MaskSpec {
        MaskSpec { shape: self.mask, exclude_zero: self.detrend != DetrendMode::None && !self.keep_zero }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    pre: Preprocess,
    /// Starting point `sigma2,nu,rho` or `auto`.
    #[arg(long, default_value = "auto")]
    init: String,
    /// Score covariance: diagonal, dftmtx or sampling:R.
    #[arg(long, default_value = "diagonal")]
    uq: ScoreCovMethod,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Use the upper-tail p-value in the residual test.
    #[arg(long)]
    one_sided: bool,
    /// Finite-difference gradients instead of the analytic score.
    #[arg(long)]
    fd_gradient: bool,
    /// Optimizer iteration cap per start.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// `sigma2,nu,rho`.
    #[arg(long, value_parser = parse_params)]
    params: MaternParams,
    /// `MxN` or `M`.
    #[arg(long, value_parser = parse_grid)]
    grid: (usize, usize),
    /// `dx,dy` or `d`.
    #[arg(long, value_parser = parse_spacing, default_value = "1")]
    spacing: (f64, f64),
    #[arg(long, default_value = "circulant")]
    method: SimMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spectral method: per-axis enlargement factor.
    #[arg(long, default_value_t = 4)]
    oversample: usize,
    /// Circulant method: clip negative eigenvalues instead of failing.
    #[arg(long)]
    clip: bool,
    #[arg(long, default_value = "")]
    units: String,
    /// Payload path (binary, or CSV with a .csv extension).
    #[arg(long)]
    output: PathBuf,
    /// Header path; defaults to the output path with `.json` appended.
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    pre: Preprocess,
    /// Model `sigma2,nu,rho`.
    #[arg(long, value_parser = parse_params, conflicts_with = "result")]
    theta: Option<MaternParams>,
    /// Result file from `fit`; its estimate and preprocessing are reused.
    #[arg(long)]
    result: Option<PathBuf>,
    /// The --theta values were estimated from this grid, which halves the null variance.
    #[arg(long, requires = "theta")]
    fitted: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    one_sided: bool,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    /// Directory for report.json, histogram.csv, qq.csv and xmap.csv; report to stdout when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long, value_parser = parse_params)]
    params: MaternParams,
    /// Comma-separated sizes, each `M` or `MxN`; may be empty.
    #[arg(long, default_value = "")]
    sizes: String,
    #[arg(long, value_parser = parse_spacing, default_value = "1")]
    spacing: (f64, f64),
    /// Comma-separated methods; all three by default.
    #[arg(long, default_value = "full-covariance,blurred-likelihood,full-likelihood")]
    methods: String,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number `{p}`"))).collect()
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    match parse_floats(s)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_params(s: &str) -> Result<MaternParams, String> {
    match parse_floats(s)?.as_slice() {
        [a, b, c] => MaternParams::new(*a, *b, *c).map_err(|e| e.to_string()),
        _ => Err(format!("expected sigma2,nu,rho, got `{s}`")),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("bad grid size `{s}` (M or MxN)");
    let mut it = s.trim().split(['x', 'X']);
    let m: usize = it.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let n: usize = match it.next() {
        Some(v) => v.trim().parse().map_err(|_| bad())?,
        None => m,
    };
    if it.next().is_some() {
        return Err(bad());
    }
    Ok((m, n))
}

fn parse_spacing(s: &str) -> Result<(f64, f64), String> {
    match parse_floats(s)?.as_slice() {
        [d] => Ok((*d, *d)),
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected d or dx,dy, got `{s}`")),
    }
}

fn default_meta(data: &Path, meta: &Option<PathBuf>) -> PathBuf {
    meta.clone().unwrap_or_else(|| {
        let mut p = data.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            std::fs::write(p, text)?;
            info!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sidedness(one_sided: bool) -> Sidedness {
    if one_sided {
        Sidedness::Upper
    } else {
        Sidedness::TwoSided
    }
}

fn cmd_fit(a: FitArgs) -> Result<(), Error> {
    let start = Instant::now();
    let meta = default_meta(&a.input.input, &a.input.meta);
    let policy = if a.input.mask_nonfinite { NonFinitePolicy::Mask } else { NonFinitePolicy::Error };
    let grid = read_grid(&meta, &a.input.input, policy)?;
    let spec = grid.field.spec;
    if a.uq == ScoreCovMethod::DftMatrix && spec.cells() > DFT_MATRIX_CELL_LIMIT {
        return Err(Error::SizeGuard { cells: spec.cells(), limit: DFT_MATRIX_CELL_LIMIT });
    }
    if grid.masked_pixels() > 0 {
        warn!("{} non-finite pixels treated as missing", grid.masked_pixels());
    }
    let init = match a.init.as_str() {
        "auto" => None,
        s => Some(parse_params(s).map_err(Error::InvalidArgument)?),
    };
    let config = FitConfig {
        init,
        detrend: a.pre.detrend,
        winsorize: a.pre.winsorize,
        taper: a.pre.taper,
        mask: a.pre.mask_spec(),
        gradient: if a.fd_gradient { GradientMode::FiniteDifference } else { GradientMode::Analytic },
        uq: a.uq,
        level: a.level,
        sidedness: sidedness(a.one_sided),
        seed: a.seed,
        optim: OptimConfig { max_iter: a.max_iter, ..OptimConfig::default() },
        ..FitConfig::default()
    };
    let w = grid.window(&a.pre.taper.window(&spec)?)?;
    info!("fitting {}x{} grid", spec.m, spec.n);
    let result = fit(&grid.field, &w, &spec, &config)?;
    let s2 = sample_variance(&preprocess(&grid.field, &config)?);
    let provenance = InputProvenance::from_files(&meta, &a.input.input, &grid)?;
    let file = ResultFile::from_fit(&result, provenance, a.pre.taper, s2, a.seed, start.elapsed().as_secs_f64());
    let t = result.theta_hat;
    info!(
        "theta_hat = ({:.6}, {:.6}, {:.6}), s2_X = {:.4}, {:?}",
        t.sigma2, t.nu, t.rho, result.residual_test.s2x, result.residual_test.decision
    );
    if result.residual_test.small_sample {
        warn!("fewer than 100 independent residuals; the normal approximation of the model test is rough");
    }
    match &a.output {
        Some(p) => {
            file.write(p)?;
            info!("wrote {}", p.display());
        }
        None => println!("{}", file.to_json()?),
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let spec = GridSpec::new(a.grid.0, a.grid.1, a.spacing.0, a.spacing.1)?;
    let cfg = SimConfig {
        method: a.method,
        oversample: a.oversample,
        seed: a.seed,
        embedding: if a.clip { EmbeddingPolicy::ClipEigenvalues } else { EmbeddingPolicy::ErrorOnNegative },
    };
    let field = simulate(&a.params, &spec, &cfg)?.with_units(a.units);
    let meta = default_meta(&a.output, &a.meta);
    write_grid(&field, &meta, &a.output)?;
    info!("wrote {} and {}", a.output.display(), meta.display());
    Ok(())
}

fn cmd_test(a: TestArgs) -> Result<(), Error> {
    let meta = default_meta(&a.input.input, &a.input.meta);
    let policy = if a.input.mask_nonfinite { NonFinitePolicy::Mask } else { NonFinitePolicy::Error };
    let grid = read_grid(&meta, &a.input.input, policy)?;
    let spec = grid.field.spec;
    let null = if a.result.is_some() || a.fitted { NullModel::Fitted } else { NullModel::Known };
    let (theta, config, taper) = match (&a.result, a.theta) {
        (Some(p), _) => {
            let r = ResultFile::read(p)?;
            let pre = r.preprocessing;
            let cfg = FitConfig { detrend: pre.detrend, winsorize: pre.winsorize, mask: pre.mask, ..FitConfig::default() };
            (r.theta_hat, cfg, pre.taper)
        }
        (None, Some(t)) => {
            let cfg = FitConfig {
                detrend: a.pre.detrend,
                winsorize: a.pre.winsorize,
                mask: a.pre.mask_spec(),
                ..FitConfig::default()
            };
            (t, cfg, a.pre.taper)
        }
        (None, None) => return Err(Error::MissingField("theta (use --theta or --result)".into())),
    };
    let w = grid.window(&taper.window(&spec)?)?;
    let field = preprocess(&grid.field, &config)?;
    let ctx = LikelihoodContext::new(&field, &w, config.mask)?;
    let map = residuals(&theta, &ctx)?;
    let report = model_test(&map, a.level, sidedness(a.one_sided), null)?;
    if report.small_sample {
        warn!("fewer than 100 independent residuals; the normal approximation is rough");
    }
    let products = distribution_products(&map.hermitian_unique(), Reference::HalfChiSquared2, a.bins)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "theta": theta,
        "report": report,
        "ks_distance": products.ks_distance,
    }))?;
    let Some(dir) = &a.out_dir else {
        println!("{json}");
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let mut hist = String::from("lower,upper,count,density,reference\n");
    for b in &products.histogram {
        hist += &format!("{},{},{},{},{}\n", b.lower, b.upper, b.count, b.density, b.reference);
    }
    std::fs::write(dir.join("histogram.csv"), hist)?;
    let mut qq = String::from("theoretical,empirical\n");
    for (t, e) in &products.qq {
        qq += &format!("{t},{e}\n");
    }
    std::fs::write(dir.join("qq.csv"), qq)?;
    let mut xmap = String::from("kx,ky,x,in_mask\n");
    for ((iy, ix), v) in map.values.indexed_iter() {
        xmap += &format!("{},{},{},{}\n", spec.kx(ix), spec.ky(iy), v, map.mask[[iy, ix]]);
    }
    std::fs::write(dir.join("xmap.csv"), xmap)?;
    info!("wrote diagnostics to {}", dir.display());
    Ok(())
}

fn cmd_bias(a: BiasArgs) -> Result<(), Error> {
    let sizes: Vec<(usize, usize)> = a
        .sizes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_grid)
        .collect::<Result<_, _>>()
        .map_err(Error::InvalidArgument)?;
    let methods: Vec<BiasMethod> =
        a.methods.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
    let table = bias_table(&a.params, &sizes, a.spacing.0, a.spacing.1, &methods)?;
    write_or_print(a.output.as_deref(), &table)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info })
        .parse_env("WHITTLE_LOG")
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            warn!("could not size the thread pool: {e}");
        }
    }
    let out = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Test(a) => cmd_test(a),
        Command::BiasPredict(a) => cmd_bias(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if matches!(e, Error::SizeGuard { .. }) {
                log::error!("hint: rerun with --uq diagonal");
            }
            match e {
                Error::NonConvergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
