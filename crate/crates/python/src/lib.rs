//! Python bindings. Vectors cross the boundary as lists of floats and
//! matrices as lists of rows.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stochastic_cbf::barrier::{
    clf_constraint, rcbf_constraint, zcbf_constraint, AffineInputConstraint, AffineSafety,
    BallSafety, ClassK, PairwiseDistance, ReciprocalBarrier, SafetyFunction, Sense,
};
use stochastic_cbf::estimator::{self, ObservationModel};
use stochastic_cbf::high_degree::{self, build_affine_chain};
use stochastic_cbf::qp::{self, Fallback, QpProblem, QpResult, QpStatus};
use stochastic_cbf::scenario::io::{summary_json, write_report_csv, write_trajectory_csv};
use stochastic_cbf::scenario::{prepare, ScenarioConfig};
use stochastic_cbf::sde::{self, LinearSystem};
use stochastic_cbf::verify::run_checks;
use stochastic_cbf::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Config(_) | Error::EstimatorConfig(_) | Error::DimensionMismatch { .. } => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn sense_name(s: Sense) -> &'static str {
    match s {
        Sense::Ge => "ge",
        Sense::Le => "le",
    }
}

fn parse_row(a: Vec<f64>, b: f64, sense: &str) -> PyResult<AffineInputConstraint> {
    let sense = match sense {
        "ge" | ">=" => Sense::Ge,
        "le" | "<=" => Sense::Le,
        other => return Err(PyValueError::new_err(format!("unknown sense {other:?}"))),
    };
    AffineInputConstraint::new(vector(a), b, sense).map_err(to_py)
}

type RowTuple = (Vec<f64>, f64, String);

fn row_tuple(row: &AffineInputConstraint) -> (Vec<f64>, f64, &'static str) {
    (row.a.iter().copied().collect(), row.b, sense_name(row.sense))
}

/// Linear plant `dx = (F x + G u) dt + σ dW`.
#[pyclass(name = "LinearSystem", module = "stochastic_cbf_py", frozen)]
struct PyLinearSystem {
    inner: Arc<LinearSystem>,
}

#[pymethods]
impl PyLinearSystem {
    #[new]
    fn new(f: Vec<Vec<f64>>, g: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> PyResult<Self> {
        let sys = LinearSystem::new(matrix(f)?, matrix(g)?, matrix(sigma)?).map_err(to_py)?;
        Ok(Self { inner: Arc::new(sys) })
    }

    #[staticmethod]
    fn double_integrator(sigma: Vec<Vec<f64>>) -> PyResult<Self> {
        let sys = LinearSystem::double_integrator(matrix(sigma)?).map_err(to_py)?;
        Ok(Self { inner: Arc::new(sys) })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.f.nrows()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.g.ncols()
    }
}

/// A safety function `h` with `{h ≥ 0}` safe.
#[pyclass(name = "SafetyFunction", module = "stochastic_cbf_py", frozen)]
struct PySafety {
    inner: Arc<dyn SafetyFunction>,
}

#[pymethods]
impl PySafety {
    /// `h(x) = a·x − b`.
    #[staticmethod]
    fn affine(a: Vec<f64>, b: f64) -> Self {
        Self {
            inner: Arc::new(AffineSafety::new(vector(a), b)),
        }
    }

    /// `h(x) = r² − ‖x − c‖²`.
    #[staticmethod]
    fn ball(center: Vec<f64>, radius: f64) -> Self {
        Self {
            inner: Arc::new(BallSafety {
                center: vector(center),
                radius,
            }),
        }
    }

    /// `h(x) = ‖p_i − p_j‖ − d_s` on stacked planar agents `(px, py, vx, vy)`.
    #[staticmethod]
    fn pairwise_distance(i: usize, j: usize, n_agents: usize, d_s: f64) -> PyResult<Self> {
        if i == j || i >= n_agents || j >= n_agents {
            return Err(PyValueError::new_err("invalid agent pair"));
        }
        Ok(Self {
            inner: Arc::new(PairwiseDistance::new(i, j, n_agents, d_s)),
        })
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = self.checked(x)?;
        Ok(self.inner.value(&x))
    }

    fn grad(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.checked(x)?;
        Ok(self.inner.grad(&x).iter().copied().collect())
    }

    fn hess(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.checked(x)?;
        Ok(rows_of(&self.inner.hess(&x)))
    }
}

impl PySafety {
    fn checked(&self, x: Vec<f64>) -> PyResult<DVector<f64>> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!(
                "expected a state of length {}, got {}",
                self.inner.dim(),
                x.len()
            )));
        }
        Ok(vector(x))
    }
}

/// Zero-CBF row `(a, b, sense)` at `x`.
#[pyfunction]
#[pyo3(signature = (system, h, x, kappa = 1.0))]
fn zcbf_row(system: &PyLinearSystem, h: &PySafety, x: Vec<f64>, kappa: f64) -> PyResult<(Vec<f64>, f64, &'static str)> {
    let row = zcbf_constraint(system.inner.as_ref(), h.inner.as_ref(), &vector(x), kappa).map_err(to_py)?;
    Ok(row_tuple(&row))
}

/// Reciprocal-CBF row for `B = 1/h` with `α₃(s) = c·s`.
#[pyfunction]
#[pyo3(signature = (system, h, x, alpha3 = 1.0))]
fn rcbf_row(system: &PyLinearSystem, h: &PySafety, x: Vec<f64>, alpha3: f64) -> PyResult<(Vec<f64>, f64, &'static str)> {
    let alpha3 = ClassK::Linear { c: alpha3 };
    alpha3.validate().map_err(to_py)?;
    let barrier = ReciprocalBarrier::new(h.inner.clone());
    let row = rcbf_constraint(system.inner.as_ref(), &barrier, alpha3, &vector(x)).map_err(to_py)?;
    Ok(row_tuple(&row))
}

/// Stochastic CLF row for the Lyapunov candidate `v`.
#[pyfunction]
fn clf_row(system: &PyLinearSystem, v: &PySafety, x: Vec<f64>) -> PyResult<(Vec<f64>, f64, &'static str)> {
    let row = clf_constraint(system.inner.as_ref(), v.inner.as_ref(), &vector(x)).map_err(to_py)?;
    Ok(row_tuple(&row))
}

fn result_dict<'py>(py: Python<'py>, r: &QpResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let status = match r.status {
        QpStatus::Optimal => "optimal",
        QpStatus::Infeasible => "infeasible",
        QpStatus::Relaxed => "relaxed",
    };
    d.set_item("status", status)?;
    d.set_item("u", r.u.iter().copied().collect::<Vec<_>>())?;
    d.set_item("active_set", r.active_set.clone())?;
    d.set_item("slack", r.slack)?;
    d.set_item("multipliers", r.multipliers.iter().copied().collect::<Vec<_>>())?;
    Ok(d)
}

/// `min ½‖u − u_nom‖²` over rows `(a, b, "ge" | "le")`. Soft rows carry a
/// weight as a fourth element. `fallback` is `None`, `"relax"` or `"hold"`.
#[pyfunction]
#[pyo3(signature = (u_nom, rows, soft = Vec::new(), fallback = None, last_u = None))]
fn solve_qp<'py>(
    py: Python<'py>,
    u_nom: Vec<f64>,
    rows: Vec<RowTuple>,
    soft: Vec<(Vec<f64>, f64, String, f64)>,
    fallback: Option<&str>,
    last_u: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = u_nom.len();
    let constraints = rows
        .into_iter()
        .map(|(a, b, s)| parse_row(a, b, &s))
        .collect::<PyResult<Vec<_>>>()?;
    let mut problem = QpProblem::new(vector(u_nom), constraints);
    for (a, b, s, w) in soft {
        problem = problem.with_soft(parse_row(a, b, &s)?, w);
    }
    let result = match fallback {
        None => qp::solve_qp(&problem),
        Some(name) => {
            let fallback = match name {
                "relax" => Fallback::Relax,
                "hold" => Fallback::Hold,
                other => return Err(PyValueError::new_err(format!("unknown fallback {other:?}"))),
            };
            let last = last_u.map_or_else(|| DVector::zeros(m), vector);
            qp::solve_with_fallback(&problem, fallback, &last)
        }
    }
    .map_err(to_py)?;
    result_dict(py, &result)
}

/// Smallest `l` with `aᵀ Fˡ G ≠ 0`.
#[pyfunction]
fn relative_degree(f: Vec<Vec<f64>>, g: Vec<Vec<f64>>, a: Vec<f64>) -> PyResult<usize> {
    high_degree::relative_degree(&matrix(f)?, &matrix(g)?, &vector(a)).map_err(to_py)
}

/// Coefficients `c_i` and offsets `d_i` of the chain `h_i(x) = c_i·x + d_i`.
#[pyfunction]
fn affine_chain(
    f: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    a: Vec<f64>,
    b: f64,
    depth: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let chain = build_affine_chain(&matrix(f)?, &matrix(sigma)?, &vector(a), b, depth).map_err(to_py)?;
    let coeffs = chain.coeffs.iter().map(|c| c.iter().copied().collect()).collect();
    Ok((coeffs, chain.offsets.clone()))
}

/// Row on the top level of the affine chain of depth equal to the relative degree.
#[pyfunction]
fn hrd_row(system: &PyLinearSystem, a: Vec<f64>, b: f64, x: Vec<f64>) -> PyResult<(Vec<f64>, f64, &'static str)> {
    let sys = system.inner.as_ref();
    let a = vector(a);
    let r = high_degree::relative_degree(&sys.f, &sys.g, &a).map_err(to_py)?;
    let chain = build_affine_chain(&sys.f, &sys.sigma, &a, b, r).map_err(to_py)?;
    let row = high_degree::hrd_constraint(&chain, sys, &vector(x)).map_err(to_py)?;
    Ok(row_tuple(&row))
}

/// `γ = √(n λ* / ε)`.
#[pyfunction]
fn gamma_lti(lambda_star: f64, n: usize, eps: f64) -> PyResult<f64> {
    estimator::gamma_lti(lambda_star, n, eps).map_err(to_py)
}

/// One Euler step of the filter Riccati equation.
#[pyfunction]
fn riccati_step(
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    dt: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let next = estimator::riccati_step(&matrix(a)?, &matrix(c)?, &matrix(q)?, &matrix(r)?, &matrix(p)?, dt)
        .map_err(to_py)?;
    Ok(rows_of(&next))
}

/// Calibrated `λ*` for `dx = A x dt + …` observed through `c` with noise `ν`,
/// from `P₀`. Returns `(lambda_star, time_constant, horizon)`.
#[pyfunction]
fn calibrate_lambda_star(
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    p0: Vec<Vec<f64>>,
    dt: f64,
) -> PyResult<(f64, f64, f64)> {
    let obs = ObservationModel::new(matrix(c)?, matrix(nu)?).map_err(to_py)?;
    let cal = estimator::calibrate_lambda_star_auto(&matrix(a)?, &obs, &matrix(q)?, &matrix(p0)?, dt)
        .map_err(to_py)?;
    Ok((cal.lambda_star, cal.time_constant, cal.horizon))
}

fn config(text: &str) -> PyResult<ScenarioConfig> {
    ScenarioConfig::from_json(text).map_err(to_py)
}

/// Runs a campaign from a JSON configuration. Returns the summary document
/// (JSON text, no wall-clock time) and the per-replicate report CSV.
#[pyfunction]
fn run_campaign(py: Python<'_>, config_json: &str) -> PyResult<(String, String)> {
    let cfg = config(config_json)?;
    let report = py.detach(|| stochastic_cbf::scenario::run_campaign(&cfg)).map_err(to_py)?;
    let summary = serde_json::to_string_pretty(&summary_json(&report, false))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut csv = Vec::new();
    write_report_csv(&report, &mut csv).map_err(to_py)?;
    Ok((summary, String::from_utf8(csv).expect("CSV output is UTF-8")))
}

/// One replicate of a JSON configuration as trajectory CSV text.
#[pyfunction]
#[pyo3(signature = (config_json, replicate = 0))]
fn simulate(py: Python<'_>, config_json: &str, replicate: usize) -> PyResult<String> {
    let cfg = config(config_json)?;
    let csv = py
        .detach(|| -> stochastic_cbf::Result<Vec<u8>> {
            let prep = prepare(&cfg)?;
            let mut out = Vec::new();
            write_trajectory_csv(&prep, replicate, &mut out)?;
            Ok(out)
        })
        .map_err(to_py)?;
    Ok(String::from_utf8(csv).expect("CSV output is UTF-8"))
}

/// Oracle and derivative suites as `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (scale = 1.0, seed = 0))]
fn check(py: Python<'_>, scale: f64, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(PyValueError::new_err("scale must be positive"));
    }
    let outcomes = py.detach(|| run_checks(scale, seed)).map_err(to_py)?;
    Ok(outcomes.into_iter().map(|o| (o.name, o.passed, o.detail)).collect())
}

/// Number of steps `⌈T/dt⌉`.
#[pyfunction]
fn step_count(horizon: f64, dt: f64) -> PyResult<usize> {
    sde::step_count(horizon, dt).map_err(to_py)
}

#[pymodule]
fn stochastic_cbf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLinearSystem>()?;
    m.add_class::<PySafety>()?;
    m.add_function(wrap_pyfunction!(zcbf_row, m)?)?;
    m.add_function(wrap_pyfunction!(rcbf_row, m)?)?;
    m.add_function(wrap_pyfunction!(clf_row, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(relative_degree, m)?)?;
    m.add_function(wrap_pyfunction!(affine_chain, m)?)?;
    m.add_function(wrap_pyfunction!(hrd_row, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_lti, m)?)?;
    m.add_function(wrap_pyfunction!(riccati_step, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_lambda_star, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(step_count, m)?)?;
    Ok(())
}
