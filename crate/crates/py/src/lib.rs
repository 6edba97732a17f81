//! Python bindings: parameters, grids, simulation, fitting and diagnostics.

use matern_whittle as mw;
use matern_whittle::diagnostics::{BiasMethod, Sidedness};
use matern_whittle::estimator::TaperSpec;
use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: mw::Error) -> PyErr {
    match e {
        mw::Error::InvalidArgument(_)
        | mw::Error::Domain(_)
        | mw::Error::ShapeMismatch { .. }
        | mw::Error::ZeroVariance
        | mw::Error::MissingField(_)
        | mw::Error::Format(_)
        | mw::Error::SizeGuard { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>, spec: &mw::GridSpec) -> PyResult<Array2<f64>> {
    if rows.len() != spec.n || rows.iter().any(|r| r.len() != spec.m) {
        return Err(PyValueError::new_err(format!("expected {} rows of {} values", spec.n, spec.m)));
    }
    Ok(Array2::from_shape_fn((spec.n, spec.m), |(i, j)| rows[i][j]))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn taper(fraction: Option<f64>) -> TaperSpec {
    match fraction {
        Some(f) if f > 0.0 => TaperSpec::Cosine { fraction: f },
        _ => TaperSpec::None,
    }
}

#[pyclass(name = "MaternParams", module = "pywhittle", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyParams(mw::MaternParams);

#[pymethods]
impl PyParams {
    #[new]
    fn new(sigma2: f64, nu: f64, rho: f64) -> PyResult<Self> {
        mw::MaternParams::new(sigma2, nu, rho).map(Self).map_err(to_py)
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.0.sigma2
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.0.nu
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.0.rho
    }

    fn spectral_density(&self, k: f64) -> PyResult<f64> {
        mw::spectral_density(&self.0, k).map_err(to_py)
    }

    fn covariance(&self, r: f64) -> PyResult<f64> {
        mw::covariance(&self.0, r).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("MaternParams(sigma2={}, nu={}, rho={})", self.0.sigma2, self.0.nu, self.0.rho)
    }
}

#[pyclass(name = "GridSpec", module = "pywhittle", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGrid(mw::GridSpec);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (m, n, dx=1.0, dy=1.0))]
    fn new(m: usize, n: usize, dx: f64, dy: f64) -> PyResult<Self> {
        mw::GridSpec::new(m, n, dx, dy).map(Self).map_err(to_py)
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.0.dx
    }

    #[getter]
    fn dy(&self) -> f64 {
        self.0.dy
    }

    fn __repr__(&self) -> String {
        format!("GridSpec(m={}, n={}, dx={}, dy={})", self.0.m, self.0.n, self.0.dx, self.0.dy)
    }
}

#[pyclass(name = "FitResult", module = "pywhittle", frozen)]
struct PyFit(mw::FitResult);

#[pymethods]
impl PyFit {
    #[getter]
    fn theta_hat(&self) -> PyParams {
        PyParams(self.0.theta_hat)
    }

    #[getter]
    fn std_errors(&self) -> [f64; 3] {
        self.0.std_errors
    }

    #[getter]
    fn covariance(&self) -> [[f64; 3]; 3] {
        self.0.cov_theta
    }

    #[getter]
    fn correlation(&self) -> [[f64; 3]; 3] {
        self.0.correlation
    }

    #[getter]
    fn intervals(&self) -> Vec<(f64, f64)> {
        self.0.intervals.iter().map(|c| (c.lower, c.upper)).collect()
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.0.loglik
    }

    #[getter]
    fn score_norm(&self) -> f64 {
        self.0.score_norm
    }

    #[getter]
    fn s2x(&self) -> f64 {
        self.0.residual_test.s2x
    }

    #[getter]
    fn p_value(&self) -> f64 {
        self.0.residual_test.p_value
    }

    #[getter]
    fn rejected(&self) -> bool {
        self.0.residual_test.decision == mw::diagnostics::Decision::Reject
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Draws one field as a list of rows.
#[pyfunction]
#[pyo3(signature = (params, grid, method="circulant", seed=0))]
fn simulate(params: PyParams, grid: PyGrid, method: &str, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let method: mw::SimMethod = method.parse().map_err(to_py)?;
    let cfg = mw::SimConfig { method, ..mw::SimConfig::circulant(seed) };
    let f = mw::simulate(&params.0, &grid.0, &cfg).map_err(to_py)?;
    Ok(to_rows(&f.values))
}

/// Expected periodogram under the window, centered layout.
#[pyfunction]
#[pyo3(signature = (params, grid, taper_fraction=None))]
fn blurred_sdf(params: PyParams, grid: PyGrid, taper_fraction: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let w = taper(taper_fraction).window(&grid.0).map_err(to_py)?;
    let s = mw::blurred_sdf(&params.0, &w, &grid.0).map_err(to_py)?;
    Ok(to_rows(&s.values))
}

#[pyfunction]
#[pyo3(signature = (values, grid, taper_fraction=None))]
fn periodogram(values: Vec<Vec<f64>>, grid: PyGrid, taper_fraction: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let field = mw::FieldSample::new(grid.0, to_array(values, &grid.0)?).map_err(to_py)?;
    let w = taper(taper_fraction).window(&grid.0).map_err(to_py)?;
    let p = mw::spectral::field_periodogram(&field, &w).map_err(to_py)?;
    Ok(to_rows(&p))
}

/// Full fit with sandwich uncertainties.
#[pyfunction]
#[pyo3(signature = (values, grid, taper_fraction=None, detrend="none", uq="diagonal", level=0.95, seed=0))]
fn fit(
    values: Vec<Vec<f64>>,
    grid: PyGrid,
    taper_fraction: Option<f64>,
    detrend: &str,
    uq: &str,
    level: f64,
    seed: u64,
) -> PyResult<PyFit> {
    let field = mw::FieldSample::new(grid.0, to_array(values, &grid.0)?).map_err(to_py)?;
    let config = mw::FitConfig {
        taper: taper(taper_fraction),
        detrend: detrend.parse().map_err(to_py)?,
        uq: uq.parse().map_err(to_py)?,
        level,
        seed,
        ..mw::FitConfig::default()
    };
    mw::fit_field(&field, &config).map(PyFit).map_err(to_py)
}

/// `(s2_X, z, p_value, rejected)` for a field and model; `fitted` when `params` were estimated from `values`.
#[pyfunction]
#[pyo3(signature = (values, grid, params, taper_fraction=None, level=0.95, one_sided=false, fitted=false))]
fn model_test(
    values: Vec<Vec<f64>>,
    grid: PyGrid,
    params: PyParams,
    taper_fraction: Option<f64>,
    level: f64,
    one_sided: bool,
    fitted: bool,
) -> PyResult<(f64, f64, f64, bool)> {
    let field = mw::FieldSample::new(grid.0, to_array(values, &grid.0)?).map_err(to_py)?;
    let w = taper(taper_fraction).window(&grid.0).map_err(to_py)?;
    let ctx = mw::LikelihoodContext::new(&field, &w, mw::MaskSpec::all()).map_err(to_py)?;
    let map = mw::residuals(&params.0, &ctx).map_err(to_py)?;
    let side = if one_sided { Sidedness::Upper } else { Sidedness::TwoSided };
    let null = if fitted { mw::NullModel::Fitted } else { mw::NullModel::Known };
    let r = mw::model_test(&map, level, side, null).map_err(to_py)?;
    Ok((r.s2x, r.z, r.p_value, r.decision == mw::diagnostics::Decision::Reject))
}

/// Predicted `<s^2>`; `method` is full-covariance, blurred-likelihood or full-likelihood.
#[pyfunction]
#[pyo3(signature = (params, grid, method="full-covariance"))]
fn sample_variance_bias(params: PyParams, grid: PyGrid, method: &str) -> PyResult<f64> {
    let m: BiasMethod = method.parse().map_err(to_py)?;
    mw::sample_variance_bias(&params.0, &grid.0, m).map_err(to_py)
}

#[pymodule]
fn pywhittle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(blurred_sdf, m)?)?;
    m.add_function(wrap_pyfunction!(periodogram, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(model_test, m)?)?;
    m.add_function(wrap_pyfunction!(sample_variance_bias, m)?)?;
    Ok(())
}
