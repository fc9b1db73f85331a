//! Python bindings. Matrices cross the boundary as lists of rows; reports
//! come back as plain dicts decoded from their JSON form.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use twoscale::diffusion::{initial_layer_bias, sigma_squared, variance_profile};
use twoscale::harness::{reference_model, run_experiment, ExperimentConfig};
use twoscale::simulator::{monte_carlo, sample_path, InitialCondition, OccupationSpec};
use twoscale::{
    group_inverse_at, nu_derivative, quasi_stationary, transition_matrix, ExpansionSet, GeneratorSpec,
    TimeVaryingGenerator, TwoScaleModel,
};

create_exception!(twoscale_py, TwoscaleError, PyException);

fn err(e: twoscale::Error) -> PyErr {
    TwoscaleError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A time-dependent generator `Q(t) = sum_k C_k p_k(t)`.
#[pyclass(name = "Generator", frozen)]
struct PyGenerator {
    inner: TimeVaryingGenerator,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec = GeneratorSpec::from_json(text).map_err(err)?;
        Ok(Self {
            inner: TimeVaryingGenerator::from_spec(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn constant(q: Vec<Vec<f64>>) -> PyResult<Self> {
        let n = q.len();
        if q.iter().any(|r| r.len() != n) {
            return Err(err(twoscale::Error::Dimension("matrix must be square".into())));
        }
        let m = DMatrix::from_fn(n, n, |i, j| q[i][j]);
        Ok(Self {
            inner: TimeVaryingGenerator::constant(m).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, t: f64) -> Vec<Vec<f64>> {
        rows(&self.inner.eval(t))
    }

    /// True when no violations occur on `n` probes over `[0, horizon]`.
    #[pyo3(signature = (horizon = 1.0, n = 101))]
    fn is_valid(&self, horizon: f64, n: usize) -> bool {
        let times = twoscale::generator::uniform_grid(0.0, horizon, n);
        twoscale::generator::validate_generator(&self.inner, &times).is_valid()
    }

    fn quasi_stationary(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(quasi_stationary(&self.inner, t).map_err(err)?.into_vec())
    }

    fn nu_derivative(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(nu_derivative(&self.inner, t).map_err(err)?.iter().copied().collect())
    }

    fn group_inverse(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&group_inverse_at(&self.inner, t).map_err(err)?.a_sharp))
    }

    fn sigma_squared(&self, weights: Vec<f64>, s: f64) -> PyResult<f64> {
        sigma_squared(&self.inner, &weights, s).map_err(err)
    }

    fn variance_profile<'py>(&self, py: Python<'py>, weights: Vec<f64>, grid: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let report = variance_profile(&self.inner, &weights, &grid)
            .and_then(|p| p.report())
            .map_err(err)?;
        to_py_json(py, &report)
    }
}

/// `A(t)/eps + B(t)` on `[0, horizon]`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: TwoScaleModel,
}

fn initial_of(start: &Bound<'_, PyAny>) -> PyResult<InitialCondition> {
    if let Ok(x) = start.extract::<usize>() {
        return Ok(InitialCondition::State(x));
    }
    match start.extract::<String>()?.as_str() {
        "quasi_stationary" => Ok(InitialCondition::QuasiStationary),
        other => Err(err(twoscale::Error::Invalid(format!("unknown initial condition {other:?}")))),
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (fast, slow, eps, horizon = 1.0))]
    fn new(fast: &PyGenerator, slow: &PyGenerator, eps: f64, horizon: f64) -> PyResult<Self> {
        Ok(Self {
            inner: TwoScaleModel::new(fast.inner.clone(), slow.inner.clone(), eps, horizon).map_err(err)?,
        })
    }

    /// The built-in three-state reference model.
    #[staticmethod]
    fn reference(eps: f64) -> PyResult<Self> {
        Ok(Self {
            inner: reference_model(eps).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.inner.eps
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn fast(&self) -> PyGenerator {
        PyGenerator {
            inner: self.inner.fast.clone(),
        }
    }

    fn with_eps(&self, eps: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_eps(eps).map_err(err)?,
        })
    }

    fn is_valid(&self) -> bool {
        self.inner.validate(101).is_valid()
    }

    fn transition_matrix(&self, py: Python<'_>, t0: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let p = py.detach(|| transition_matrix(&self.inner, t0, t)).map_err(err)?;
        Ok(rows(&p))
    }

    /// Order-`order` expansion of the transition matrix from `t0` to `t`.
    fn expansion(&self, py: Python<'_>, order: usize, t0: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let m = &self.inner;
        let p = py
            .detach(|| {
                let set = ExpansionSet::build(m.fast.clone(), m.slow.clone(), order, m.horizon)?;
                let layer = set.layer(t0)?;
                set.eval(&layer, t, m.eps)
            })
            .map_err(err)?;
        Ok(rows(&p))
    }

    /// `(values, k_hat)` of the initial-layer bias on `grid`.
    fn initial_layer_bias(&self, py: Python<'_>, x0: usize, weights: Vec<f64>, grid: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let bias = py
            .detach(|| initial_layer_bias(&self.inner, x0, &weights, &grid))
            .map_err(err)?;
        Ok((bias.values, bias.k_hat))
    }

    /// One path as `(jump_times, states)`, starting in `x0`.
    fn sample_path(&self, x0: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let path = sample_path(&self.inner, x0, seed).map_err(err)?;
        Ok((path.jump_times, path.states))
    }

    /// Monte Carlo summary of `xi_eps(T)`; `start` is a state index or
    /// `"quasi_stationary"`.
    #[pyo3(signature = (weights, n, seed, start = None))]
    fn monte_carlo<'py>(
        &self,
        py: Python<'py>,
        weights: Vec<f64>,
        n: usize,
        seed: u64,
        start: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let initial = match start {
            Some(s) => initial_of(s)?,
            None => InitialCondition::State(0),
        };
        let model = &self.inner;
        let summary = py
            .detach(|| {
                let spec = OccupationSpec::new(weights, vec![model.horizon])?;
                monte_carlo(model, &spec, initial, n, seed)
            })
            .map_err(err)?;
        to_py_json(py, &summary)
    }
}

/// Runs an experiment config given as JSON text; relative model paths
/// resolve against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config_json, base_dir = "."))]
fn run_experiment_json<'py>(py: Python<'py>, config_json: &str, base_dir: &str) -> PyResult<Bound<'py, PyAny>> {
    let config = ExperimentConfig::from_json(config_json, &PathBuf::from(base_dir)).map_err(err)?;
    let report = py.detach(|| run_experiment(&config)).map_err(err)?;
    to_py_json(py, &report)
}

/// The command-line entry point; returns the exit code.
#[pyfunction]
fn cli_main(py: Python<'_>, argv: Vec<String>) -> i32 {
    let args: Vec<String> = std::iter::once("twoscale".to_string()).chain(argv).collect();
    py.detach(|| twoscale::harness::cli::cli_main(args))
}

#[pymodule]
fn twoscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_experiment_json, m)?)?;
    m.add_function(wrap_pyfunction!(cli_main, m)?)?;
    m.add("TwoscaleError", m.py().get_type::<TwoscaleError>())?;
    Ok(())
}
