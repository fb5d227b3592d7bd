use std::cell::RefCell;
use std::path::PathBuf;

use halfline_weyl::cli::{self, RunConfig};
use halfline_weyl::oracle;
use halfline_weyl::potential::{self, LambdaRect};
use halfline_weyl::spectrum::{self, CharFunction, ResolventSettings, SpectralSettings};
use halfline_weyl::weyl::{self, WeylSettings};
use halfline_weyl::Error;
use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(halfline_weyl, WeylError, PyException, "Numerical failure (non-convergence, near-zero contour, ...).");
create_exception!(halfline_weyl, PreconditionError, WeylError, "Condition A or a branch requirement fails.");

fn to_py(e: Error) -> PyErr {
    match cli::exit_code(&e) {
        cli::EXIT_CONFIG => PyValueError::new_err(e.to_string()),
        cli::EXIT_PRECONDITION => PreconditionError::new_err(e.to_string()),
        _ => WeylError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for halfline_weyl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "Potential", module = "halfline_weyl")]
#[derive(Clone)]
struct PyPotential {
    inner: potential::Potential,
}

#[pymethods]
impl PyPotential {
    #[staticmethod]
    fn constant(value: Complex64) -> Self {
        Self { inner: potential::Potential::constant(value) }
    }

    /// `amplitude * x**exponent * exp(1j * phase)`.
    #[staticmethod]
    #[pyo3(signature = (amplitude, exponent, phase = 0.0))]
    fn monomial_phase(amplitude: f64, exponent: f64, phase: f64) -> PyResult<Self> {
        Ok(Self { inner: potential::Potential::monomial_phase(amplitude, exponent, phase).py()? })
    }

    /// `q(x) = 1j * x`.
    #[staticmethod]
    fn complex_airy() -> Self {
        Self { inner: potential::Potential::complex_airy() }
    }

    /// `q(x) = x**2`.
    #[staticmethod]
    fn harmonic() -> Self {
        Self { inner: potential::Potential::harmonic() }
    }

    /// Coefficients lowest degree first.
    #[staticmethod]
    fn polynomial(coefficients: Vec<Complex64>) -> PyResult<Self> {
        Ok(Self { inner: potential::Potential::polynomial(coefficients).py()? })
    }

    #[staticmethod]
    fn tabulated(xs: Vec<f64>, values: Vec<Complex64>) -> PyResult<Self> {
        Ok(Self { inner: potential::Potential::tabulated(xs, values).py()? })
    }

    /// The potential `q - s`.
    fn shifted(&self, s: Complex64) -> Self {
        Self { inner: self.inner.shifted(s) }
    }

    fn with_smooth_start(&self, x_s: f64) -> Self {
        Self { inner: self.inner.clone().with_smooth_start(x_s) }
    }

    fn q(&self, x: f64) -> Complex64 {
        self.inner.q(x)
    }

    fn dq(&self, x: f64) -> Complex64 {
        self.inner.dq(x)
    }

    #[getter]
    fn smooth_start(&self) -> f64 {
        self.inner.smooth_start()
    }

    fn __repr__(&self) -> String {
        format!("Potential({:?}, shift={})", self.inner.family(), self.inner.shift())
    }
}

#[pyclass(name = "BoundaryForm", module = "halfline_weyl")]
#[derive(Clone, Copy)]
struct PyBoundaryForm {
    inner: spectrum::BoundaryForm,
}

#[pymethods]
impl PyBoundaryForm {
    /// `U(y) = alpha0 y(0) + alpha1 y'(0)`.
    #[new]
    fn new(alpha0: Complex64, alpha1: Complex64) -> PyResult<Self> {
        Ok(Self { inner: spectrum::BoundaryForm::new(alpha0, alpha1).py()? })
    }

    #[staticmethod]
    fn dirichlet() -> Self {
        Self { inner: spectrum::BoundaryForm::dirichlet() }
    }

    #[staticmethod]
    fn neumann() -> Self {
        Self { inner: spectrum::BoundaryForm::neumann() }
    }

    #[getter]
    fn alpha0(&self) -> Complex64 {
        self.inner.alpha0
    }

    #[getter]
    fn alpha1(&self) -> Complex64 {
        self.inner.alpha1
    }

    fn __repr__(&self) -> String {
        format!("BoundaryForm({}, {})", self.inner.alpha0, self.inner.alpha1)
    }
}

#[pyclass(name = "ConditionReport", module = "halfline_weyl", get_all)]
struct PyConditionReport {
    holds: bool,
    constant: f64,
    margin: f64,
    first_violation: Option<f64>,
}

impl From<potential::ConditionReport> for PyConditionReport {
    fn from(r: potential::ConditionReport) -> Self {
        Self { holds: r.holds, constant: r.constant, margin: r.margin, first_violation: r.first_violation }
    }
}

#[pymethods]
impl PyConditionReport {
    fn __repr__(&self) -> String {
        format!("ConditionReport(holds={}, margin={}, first_violation={:?})", self.holds, self.margin, self.first_violation)
    }
}

#[pyclass(name = "WeylResult", module = "halfline_weyl", get_all)]
struct PyWeylResult {
    lambda_: Complex64,
    anchor: f64,
    theta: Complex64,
    mu: Complex64,
    converged: bool,
    final_radius: f64,
    wronskian_drift: f64,
    /// `(b, center, radius)` per schedule point.
    disks: Vec<(f64, Complex64, f64)>,
}

#[pymethods]
impl PyWeylResult {
    fn __repr__(&self) -> String {
        format!("WeylResult(mu={}, converged={}, final_radius={:e})", self.mu, self.converged, self.final_radius)
    }
}

#[pyclass(name = "Eigenvalue", module = "halfline_weyl", get_all)]
struct PyEigenvalue {
    lambda_: Complex64,
    multiplicity: u32,
    residual: f64,
    enclosure_radius: f64,
    refined: bool,
}

#[pymethods]
impl PyEigenvalue {
    fn __repr__(&self) -> String {
        format!("Eigenvalue({}, multiplicity={})", self.lambda_, self.multiplicity)
    }
}

#[pyclass(name = "ResolventOutput", module = "halfline_weyl", get_all)]
struct PyResolventOutput {
    x: Vec<f64>,
    y: Vec<Complex64>,
    dy: Vec<Complex64>,
    norm_y: f64,
    norm_y_rho: Option<f64>,
    norm_y2_rho: Option<f64>,
    norm_f_weighted: f64,
    ode_residual: f64,
    boundary_residual: f64,
    char_value: Complex64,
}

#[pyclass(name = "BoundReport", module = "halfline_weyl", get_all)]
struct PyBoundReport {
    c: f64,
    norm_y: f64,
    norm_y_rho: f64,
    norm_y2_rho: f64,
    norm_g: f64,
    plain_bound: bool,
    energy_bound: bool,
    weighted_bound: bool,
    worst_ratio: f64,
}

#[pyfunction]
fn eval_p(pot: &PyPotential, lam: Complex64, x: f64) -> PyResult<Complex64> {
    potential::eval_p(&pot.inner, lam, x).py()
}

#[pyfunction]
fn rho(pot: &PyPotential, lam: Complex64, x: f64) -> PyResult<f64> {
    potential::rho(&pot.inner, lam, x).py()
}

#[pyfunction]
#[pyo3(signature = (pot, lam, x_lo, x_hi, c, n_grid = potential::DEFAULT_GRID))]
fn check_condition_a(pot: &PyPotential, lam: Complex64, x_lo: f64, x_hi: f64, c: f64, n_grid: usize) -> PyResult<PyConditionReport> {
    Ok(potential::check_condition_a(&pot.inner, lam, x_lo, x_hi, c, n_grid).py()?.into())
}

#[pyfunction]
#[pyo3(signature = (pot, kappa, delta, x_lo, x_hi, n_grid = potential::DEFAULT_GRID))]
fn check_theorem3(pot: &PyPotential, kappa: f64, delta: f64, x_lo: f64, x_hi: f64, n_grid: usize) -> PyResult<PyConditionReport> {
    Ok(potential::check_theorem3(&pot.inner, kappa, delta, x_lo, x_hi, n_grid).py()?.into())
}

#[pyfunction]
#[pyo3(signature = (pot, lam, c, x_max, n_grid = potential::DEFAULT_GRID))]
fn find_anchor(pot: &PyPotential, lam: Complex64, c: f64, x_max: f64, n_grid: usize) -> PyResult<Option<f64>> {
    potential::find_anchor(&pot.inner, lam, c, x_max, n_grid).py()
}

/// Membership of a rectangular lambda grid: `(lambda, member, anchor)` per point.
#[pyfunction]
#[pyo3(signature = (pot, re, im, n_re, n_im, c, x_max, n_grid = potential::DEFAULT_GRID))]
#[allow(clippy::too_many_arguments)]
fn sample_region(
    py: Python<'_>,
    pot: &PyPotential,
    re: (f64, f64),
    im: (f64, f64),
    n_re: usize,
    n_im: usize,
    c: f64,
    x_max: f64,
    n_grid: usize,
) -> PyResult<Vec<(Complex64, bool, Option<f64>)>> {
    let lambdas = LambdaRect::new(re, im).grid(n_re, n_im);
    let samples = py.allow_threads(|| potential::sample_n_region(&pot.inner, &lambdas, c, x_max, n_grid)).py()?;
    Ok(samples.into_iter().map(|s| (s.lambda, s.member, s.anchor)).collect())
}

#[pyfunction]
#[pyo3(signature = (pot, lam, anchor, ode_tol = 1e-10, radius_tol = 1e-8, b_max = None))]
fn weyl_theta(
    py: Python<'_>,
    pot: &PyPotential,
    lam: Complex64,
    anchor: f64,
    ode_tol: f64,
    radius_tol: f64,
    b_max: Option<f64>,
) -> PyResult<PyWeylResult> {
    let settings = WeylSettings { b_max, ..WeylSettings::with_tolerances(ode_tol, radius_tol) };
    let wr = py.allow_threads(|| weyl::weyl_theta(&pot.inner, lam, anchor, &settings)).py()?;
    Ok(PyWeylResult {
        lambda_: wr.lambda,
        anchor: wr.anchor,
        theta: wr.theta,
        mu: wr.mu,
        converged: wr.converged,
        final_radius: wr.final_radius,
        wronskian_drift: wr.wronskian_drift,
        disks: wr.disks.iter().map(|d| (d.b, d.center, d.radius)).collect(),
    })
}

/// Samples `(x, eta, eta')` of the Weyl solution on `n` uniform points of `[0, x_max]`.
#[pyfunction]
#[pyo3(signature = (pot, lam, anchor, x_max, n = 401, ode_tol = 1e-10, radius_tol = 1e-8))]
#[allow(clippy::too_many_arguments)]
fn weyl_solution(
    py: Python<'_>,
    pot: &PyPotential,
    lam: Complex64,
    anchor: f64,
    x_max: f64,
    n: usize,
    ode_tol: f64,
    radius_tol: f64,
) -> PyResult<Vec<(f64, Complex64, Complex64)>> {
    let settings = WeylSettings::with_tolerances(ode_tol, radius_tol);
    py.allow_threads(|| {
        let sol = weyl::weyl_solution(&pot.inner, lam, anchor, x_max, &settings)?;
        sol.samples(&pot.inner, n)
    })
    .py()
}

#[pyfunction]
fn char_function(py: Python<'_>, pot: &PyPotential, bc: &PyBoundaryForm, lam: Complex64, anchor: f64) -> PyResult<Complex64> {
    py.allow_threads(|| spectrum::char_function(&pot.inner, &bc.inner, lam, anchor, &SpectralSettings::default())).py()
}

fn spectral(tol: f64) -> SpectralSettings {
    SpectralSettings { tol, ..SpectralSettings::default() }
}

#[pyfunction]
#[pyo3(signature = (pot, bc, re, im, tol = 1e-8, anchor = None))]
fn find_eigenvalues(
    py: Python<'_>,
    pot: &PyPotential,
    bc: &PyBoundaryForm,
    re: (f64, f64),
    im: (f64, f64),
    tol: f64,
    anchor: Option<f64>,
) -> PyResult<Vec<PyEigenvalue>> {
    let rect = LambdaRect::new(re, im);
    let search = py
        .allow_threads(|| {
            let w = match anchor {
                Some(a) => CharFunction::new(&pot.inner, bc.inner, a, spectral(tol)),
                None => CharFunction::for_region(&pot.inner, bc.inner, &rect, spectral(tol))?,
            };
            spectrum::find_eigenvalues(&w, &rect)
        })
        .py()?;
    Ok(search
        .eigenvalues
        .into_iter()
        .map(|e| PyEigenvalue {
            lambda_: e.lambda,
            multiplicity: e.multiplicity,
            residual: e.residual,
            enclosure_radius: e.enclosure_radius,
            refined: e.refined,
        })
        .collect())
}

// wraps a Python callable; the first exception is kept and re-raised
struct Callable<'py> {
    f: Bound<'py, PyAny>,
    err: RefCell<Option<PyErr>>,
}

impl<'py> Callable<'py> {
    fn new(f: Bound<'py, PyAny>) -> Self {
        Self { f, err: RefCell::new(None) }
    }

    fn eval(&self, x: f64) -> Complex64 {
        if self.err.borrow().is_some() {
            return Complex64::new(f64::NAN, f64::NAN);
        }
        match self.f.call1((x,)).and_then(|v| v.extract::<Complex64>()) {
            Ok(v) => v,
            Err(e) => {
                *self.err.borrow_mut() = Some(e);
                Complex64::new(f64::NAN, f64::NAN)
            }
        }
    }

    fn finish<T>(self, r: halfline_weyl::Result<T>) -> PyResult<T> {
        match self.err.into_inner() {
            Some(e) => Err(e),
            None => r.py(),
        }
    }
}

/// `R_lambda f` on a uniform grid of `[0, x_max]`; `f` is a callable of `x`.
#[pyfunction]
#[pyo3(signature = (pot, bc, lam, f, x_max = 20.0, h = 0.005, anchor = None, tol = 1e-8))]
#[allow(clippy::too_many_arguments)]
fn apply_resolvent(
    pot: &PyPotential,
    bc: &PyBoundaryForm,
    lam: Complex64,
    f: Bound<'_, PyAny>,
    x_max: f64,
    h: f64,
    anchor: Option<f64>,
    tol: f64,
) -> PyResult<PyResolventOutput> {
    let settings = spectral(tol);
    let anchor = match anchor {
        Some(a) => a,
        None => {
            let point = LambdaRect::new((lam.re, lam.re), (lam.im, lam.im));
            potential::region_anchor(&pot.inner, &point, settings.condition_c, settings.anchor_x_max, settings.anchor_grid, 2)
                .py()?
        }
    };
    let w = CharFunction::new(&pot.inner, bc.inner, anchor, settings);
    let rs = ResolventSettings { x_max, h, tol, ..ResolventSettings::default() };
    let call = Callable::new(f);
    let out = spectrum::apply_resolvent_fn(&w, lam, &|x| call.eval(x), &rs);
    let out = call.finish(out)?;
    Ok(PyResolventOutput {
        x: out.x,
        y: out.y,
        dy: out.dy,
        norm_y: out.norm_y,
        norm_y_rho: out.norm_y_rho,
        norm_y2_rho: out.norm_y2_rho,
        norm_f_weighted: out.norm_f_weighted,
        ode_residual: out.ode_residual,
        boundary_residual: out.boundary_residual,
        char_value: out.char_value,
    })
}

/// The three weighted resolvent inequalities at `lam` (condition A must hold from 0).
#[pyfunction]
#[pyo3(signature = (pot, bc, lam, f, c = None, x_max = 20.0))]
fn weighted_bound_report(
    pot: &PyPotential,
    bc: &PyBoundaryForm,
    lam: Complex64,
    f: Bound<'_, PyAny>,
    c: Option<f64>,
    x_max: f64,
) -> PyResult<PyBoundReport> {
    let rs = ResolventSettings { x_max, ..ResolventSettings::default() };
    let call = Callable::new(f);
    let r = spectrum::weighted_bound_report_fn(&pot.inner, &bc.inner, lam, &|x| call.eval(x), c, &SpectralSettings::default(), &rs);
    let r = call.finish(r)?;
    Ok(PyBoundReport {
        c: r.c,
        norm_y: r.norm_y,
        norm_y_rho: r.norm_y_rho,
        norm_y2_rho: r.norm_y2_rho,
        norm_g: r.norm_g,
        plain_bound: r.plain_bound,
        energy_bound: r.energy_bound,
        weighted_bound: r.weighted_bound,
        worst_ratio: r.worst_ratio,
    })
}

/// Finite-difference eigenvalues on `[0, length]`: `(values, error estimates)`.
#[pyfunction]
fn fd_eigenvalues(
    py: Python<'_>,
    pot: &PyPotential,
    bc: &PyBoundaryForm,
    length: f64,
    n: usize,
    count: usize,
) -> PyResult<(Vec<Complex64>, Vec<f64>)> {
    let problem = oracle::FdProblem { length, n, bc: bc.inner };
    let r = py.allow_threads(|| oracle::fd_eigenvalues(&pot.inner, &problem, count)).py()?;
    Ok((r.eigenvalues, r.errors))
}

#[pyfunction]
fn airy_zero(n: usize) -> PyResult<f64> {
    oracle::airy_zero(n).py()
}

#[pyfunction]
fn complex_airy_eigenvalue(n: usize) -> PyResult<Complex64> {
    oracle::complex_airy_eigenvalue(n).py()
}

/// Run a TOML config as the command-line tool would; returns the exit code.
#[pyfunction]
#[pyo3(signature = (config, out, plots = false))]
fn run_config(py: Python<'_>, config: PathBuf, out: PathBuf, plots: bool) -> PyResult<i32> {
    let cfg = RunConfig::load(&config).py()?;
    py.allow_threads(|| cli::run(&cfg, &out, plots)).py()
}

#[pymodule]
#[pyo3(name = "halfline_weyl")]
fn halfline_weyl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("WeylError", m.py().get_type_bound::<WeylError>())?;
    m.add("PreconditionError", m.py().get_type_bound::<PreconditionError>())?;
    m.add_class::<PyPotential>()?;
    m.add_class::<PyBoundaryForm>()?;
    m.add_class::<PyConditionReport>()?;
    m.add_class::<PyWeylResult>()?;
    m.add_class::<PyEigenvalue>()?;
    m.add_class::<PyResolventOutput>()?;
    m.add_class::<PyBoundReport>()?;
    m.add_function(wrap_pyfunction!(eval_p, m)?)?;
    m.add_function(wrap_pyfunction!(rho, m)?)?;
    m.add_function(wrap_pyfunction!(check_condition_a, m)?)?;
    m.add_function(wrap_pyfunction!(check_theorem3, m)?)?;
    m.add_function(wrap_pyfunction!(find_anchor, m)?)?;
    m.add_function(wrap_pyfunction!(sample_region, m)?)?;
    m.add_function(wrap_pyfunction!(weyl_theta, m)?)?;
    m.add_function(wrap_pyfunction!(weyl_solution, m)?)?;
    m.add_function(wrap_pyfunction!(char_function, m)?)?;
    m.add_function(wrap_pyfunction!(find_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(apply_resolvent, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_bound_report, m)?)?;
    m.add_function(wrap_pyfunction!(fd_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(airy_zero, m)?)?;
    m.add_function(wrap_pyfunction!(complex_airy_eigenvalue, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
