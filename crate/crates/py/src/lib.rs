//! Python bindings: kernel evaluation, small in-memory simulations, and the
//! run-directory commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use riesz_kinetics::analysis;
use riesz_kinetics::characteristics::{self, EvolveOptions, TimeSchedule};
use riesz_kinetics::config::RunConfig;
use riesz_kinetics::initial_data::{self, Ensemble, GaussianData as CoreGaussian};
use riesz_kinetics::kernel::{Interaction, SofteningMode};
use riesz_kinetics::meanfield::FieldMethod;
use riesz_kinetics::scattering::{self, Scattering};
use riesz_kinetics::{run, Error, Vec3};

type V3 = [f64; 3];

fn err(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::InvalidParameter(_) | Error::Config(_) | Error::KernelDomain => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn v3(a: V3) -> Vec3 {
    Vec3::from(a)
}

fn arr(v: &Vec3) -> V3 {
    [v.x, v.y, v.z]
}

/// Serializable value as a Python object (via JSON).
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Softened Riesz kernel `λ(|x|² + ε²)^{-α/2}`.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct RieszParams(riesz_kinetics::RieszParams);

#[pymethods]
impl RieszParams {
    #[new]
    #[pyo3(signature = (alpha, lam = 1.0, eps = 0.0))]
    fn new(alpha: f64, lam: f64, eps: f64) -> PyResult<Self> {
        riesz_kinetics::RieszParams::new(alpha, lam, eps).map(Self).map_err(err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.0.lambda
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.0.eps
    }

    fn potential(&self, x: V3) -> PyResult<f64> {
        self.0.potential(&v3(x)).map_err(err)
    }

    fn grad(&self, x: V3) -> PyResult<V3> {
        self.0.grad(&v3(x)).map(|g| arr(&g)).map_err(err)
    }

    fn hessian(&self, x: V3) -> PyResult<[V3; 3]> {
        let h = self.0.hessian(&v3(x)).map_err(err)?;
        Ok([0, 1, 2].map(|i| [h[(i, 0)], h[(i, 1)], h[(i, 2)]]))
    }

    fn __repr__(&self) -> String {
        format!("RieszParams(alpha={}, lam={}, eps={})", self.0.alpha, self.0.lambda, self.0.eps)
    }
}

/// Gaussian initial datum `f₀`.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct GaussianData(CoreGaussian);

#[pymethods]
impl GaussianData {
    #[new]
    #[pyo3(signature = (eta, sigma_x = 1.0, sigma_v = 1.0, center_x = [0.0; 3], center_v = [0.0; 3]))]
    fn new(eta: f64, sigma_x: f64, sigma_v: f64, center_x: V3, center_v: V3) -> PyResult<Self> {
        let d = CoreGaussian { eta, sigma_x, sigma_v, center_x, center_v };
        d.validate().map_err(err)?;
        Ok(Self(d))
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.0.eta
    }

    fn evaluate(&self, x: V3, v: V3) -> f64 {
        self.0.evaluate(&v3(x), &v3(v))
    }

    fn mass(&self) -> f64 {
        self.0.mass()
    }

    /// Tensor-grid particles `(positions, velocities, weights)`.
    #[pyo3(signature = (n_per_axis, radius = 5.0))]
    fn discretize(&self, n_per_axis: usize, radius: f64) -> PyResult<(Vec<V3>, Vec<V3>, Vec<f64>)> {
        let q = initial_data::QuadratureSpec::uniform(radius, n_per_axis);
        let e = initial_data::discretize(&self.0, &q).map_err(err)?;
        Ok((e.positions.iter().map(arr).collect(), e.velocities.iter().map(arr).collect(), e.weights))
    }
}

/// Snapshots of an evolved ensemble.
#[pyclass(frozen)]
struct FlowHistory(characteristics::FlowHistory);

#[pymethods]
impl FlowHistory {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn times(&self) -> Vec<f64> {
        self.0.times()
    }

    fn positions(&self, k: usize) -> PyResult<Vec<V3>> {
        self.snapshot(k).map(|s| s.x.iter().map(arr).collect())
    }

    fn velocities(&self, k: usize) -> PyResult<Vec<V3>> {
        self.snapshot(k).map(|s| s.v.iter().map(arr).collect())
    }

    fn momentum(&self, k: usize) -> PyResult<V3> {
        self.snapshot(k)?;
        Ok(arr(&self.0.momentum(k)))
    }

    /// Trace `(y, w)` at time `t` back to time 0.
    fn backward_trace(&self, py: Python<'_>, t: f64, y: V3, w: V3) -> PyResult<(V3, V3)> {
        let (x, v) = py.detach(|| self.0.backward_trace(t, (v3(y), v3(w)))).map_err(err)?;
        Ok((arr(&x), arr(&v)))
    }

    fn liouville_check(&self, py: Python<'_>, t: f64, x: V3, v: V3, delta: f64) -> PyResult<f64> {
        py.detach(|| self.0.liouville_check(t, (v3(x), v3(v)), delta)).map_err(err)
    }

    /// `A_t(v)` at snapshot `k` and `A_∞(v)` from the fitted momentum limits
    /// on the last decade.
    fn velocity_correction(&self, k: usize, v: V3) -> PyResult<(V3, V3)> {
        self.snapshot(k)?;
        let sc = Scattering::new(&self.0, scattering::last_decade(self.0.t_final())).map_err(err)?;
        Ok((arr(&sc.a_t(k, &v3(v))), arr(&sc.a_inf(&v3(v)))))
    }
}

impl FlowHistory {
    fn snapshot(&self, k: usize) -> PyResult<&characteristics::FlowState> {
        self.0
            .snapshots
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("snapshot {k} out of range")))
    }
}

/// Evolve weighted particles with the self-consistent field (direct sums).
#[pyfunction]
#[pyo3(signature = (positions, velocities, weights, params, t_final, comoving = true))]
fn evolve(
    py: Python<'_>,
    positions: Vec<V3>,
    velocities: Vec<V3>,
    weights: Vec<f64>,
    params: &RieszParams,
    t_final: f64,
    comoving: bool,
) -> PyResult<FlowHistory> {
    let ens = Ensemble::new(
        positions.into_iter().map(v3).collect(),
        velocities.into_iter().map(v3).collect(),
        weights,
    )
    .map_err(err)?;
    let mode = if comoving { SofteningMode::Comoving } else { SofteningMode::Fixed };
    let schedule = TimeSchedule { t_final, ..TimeSchedule::default() };
    let interaction = Interaction::new(params.0, mode);
    py.detach(|| characteristics::evolve(&ens, &schedule, interaction, FieldMethod::Direct, &EvolveOptions::default()))
        .map(FlowHistory)
        .map_err(err)
}

/// Least-squares log–log slope on `window`.
#[pyfunction]
fn rate_fit(py: Python<'_>, t: Vec<f64>, y: Vec<f64>, window: (f64, f64)) -> PyResult<Py<PyAny>> {
    let series: Vec<(f64, f64)> = t.into_iter().zip(y).collect();
    to_py(py, &analysis::rate_fit(&series, window).map_err(err)?)
}

/// Configuration as TOML: `"default"`, `"ci"`, or a file path.
#[pyfunction]
fn config_toml(name: &str) -> PyResult<String> {
    let cfg = match name {
        "default" => RunConfig::default(),
        "ci" => RunConfig::ci(),
        path => RunConfig::load(&PathBuf::from(path)).map_err(err)?,
    };
    cfg.to_toml().map_err(err)
}

#[pyfunction]
fn config_hash(toml: &str) -> PyResult<String> {
    Ok(RunConfig::from_toml(toml).map_err(err)?.hash())
}

#[pyfunction]
fn simulate(py: Python<'_>, toml: &str, out: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = RunConfig::from_toml(toml).map_err(err)?;
    let s = py.detach(|| run::with_threads(cfg.threads, || run::simulate(&cfg, &out))).map_err(err)?.map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
fn scatter(py: Python<'_>, toml: &str, out: PathBuf) -> PyResult<Py<PyAny>> {
    let cfg = RunConfig::from_toml(toml).map_err(err)?;
    let s = py.detach(|| run::with_threads(cfg.threads, || run::scatter(&cfg, &out))).map_err(err)?.map_err(err)?;
    to_py(py, &s)
}

#[pyfunction]
fn rates(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &run::rates(&dir).map_err(err)?)
}

/// The fast invariant suite as `(name, passed, detail)` triples.
#[pyfunction]
fn check(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(run::check).into_iter().map(|l| (l.name, l.pass, l.detail)).collect()
}

#[pymodule]
fn riesz_kinetics_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RieszParams>()?;
    m.add_class::<GaussianData>()?;
    m.add_class::<FlowHistory>()?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(config_toml, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(scatter, m)?)?;
    m.add_function(wrap_pyfunction!(rates, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
