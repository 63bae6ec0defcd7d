//! Python bindings. Structured values cross the boundary as plain Python
//! objects built from the same JSON the rest of the tooling reads.

pub mod convert;

use ::pickteach as core;
use core::experiment::{self, ExperimentSpec};
use core::gp::{self, Bounds, FitOptions, Hyperparameters};
use core::persist;
use core::policy::{CorrectionTarget, MudsPolicy};
use core::scenario::{bundled, BUNDLED};
use core::teaching::{
    record_demo, train_policy, Demonstration, NoCorrections, RawSample, RoundConfig, TrainConfig,
    TrainingSession, DEFAULT_RECORD_RATE_HZ,
};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use convert::{round_summary, scenario_from, vec3};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn persist_err(e: persist::PersistError) -> PyErr {
    match e {
        persist::PersistError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// Accepts a bundled scenario name or a scenario dict.
fn scenario_arg(obj: &Bound<'_, PyAny>) -> PyResult<core::sim::Scenario> {
    let text = match obj.extract::<String>() {
        Ok(name) => name,
        Err(_) => obj
            .py()
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?,
    };
    scenario_from(&text).map_err(value_err)
}

fn demos_arg(demos: &[PyRef<'_, PyDemonstration>]) -> Vec<Demonstration> {
    demos.iter().map(|d| d.inner.clone()).collect()
}

fn train_config_arg(config: Option<&Bound<'_, PyAny>>) -> PyResult<TrainConfig> {
    config.map_or_else(|| Ok(TrainConfig::default()), from_py)
}

/// Gaussian-process regressor with an ARD squared-exponential kernel.
#[pyclass(name = "GpModel", module = "pickteach")]
pub struct PyGpModel {
    inner: gp::GpModel,
}

#[pymethods]
impl PyGpModel {
    /// Model with fixed hyperparameters; `lengthscales` has one entry per input axis.
    #[new]
    fn new(
        inputs: Vec<Vec<f64>>,
        outputs: Vec<Vec<f64>>,
        signal_std: f64,
        lengthscales: Vec<f64>,
        noise_std: f64,
    ) -> PyResult<Self> {
        let theta = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let hp = Hyperparameters::new(signal_std, theta, noise_std).map_err(value_err)?;
        let bounds = Bounds::positional(hp.dim());
        let inner = gp::GpModel::new(
            gp::rows_to_matrix(&inputs).map_err(value_err)?,
            gp::rows_to_matrix(&outputs).map_err(value_err)?,
            hp,
            bounds,
        )
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Fits hyperparameters by maximum likelihood inside desk-scale bounds.
    #[staticmethod]
    #[pyo3(signature = (inputs, outputs, seed = 0, restarts = 5))]
    fn fit(
        inputs: Vec<Vec<f64>>,
        outputs: Vec<Vec<f64>>,
        seed: u64,
        restarts: usize,
    ) -> PyResult<Self> {
        let x = gp::rows_to_matrix(&inputs).map_err(value_err)?;
        let y = gp::rows_to_matrix(&outputs).map_err(value_err)?;
        let options = FitOptions {
            restarts,
            ..FitOptions::seeded(seed)
        };
        let inner = gp::GpModel::fit_with(x.clone(), y, Bounds::positional(x.ncols()), &options)
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Posterior `(mean, variance)` at `x`.
    fn predict(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let p = self.inner.predict(&x).map_err(value_err)?;
        Ok((p.mean, p.variance))
    }

    fn variance_gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.variance_gradient(&x).map_err(value_err)
    }

    /// Index and coordinates of the most correlated database input.
    fn mu_project(&self, x: Vec<f64>) -> PyResult<(usize, Vec<f64>)> {
        self.inner.mu_project(&x).map_err(value_err)
    }

    fn apply_correction(&mut self, x: Vec<f64>, channel: usize, epsilon: f64) -> PyResult<()> {
        self.inner
            .apply_correction(&x, channel, epsilon)
            .map_err(value_err)
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }

    fn hyperparameters(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.hyperparameters())
    }

    fn outputs(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len())
            .map(|i| self.inner.output(i))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A recorded demonstration resampled to the record rate.
#[pyclass(name = "Demonstration", module = "pickteach")]
pub struct PyDemonstration {
    inner: Demonstration,
}

#[pymethods]
impl PyDemonstration {
    /// Records raw samples, each a dict with `t`, `position`, `orientation` and `width`.
    #[staticmethod]
    #[pyo3(signature = (samples, rate = DEFAULT_RECORD_RATE_HZ))]
    fn record(samples: &Bound<'_, PyAny>, rate: f64) -> PyResult<Self> {
        let raw: Vec<RawSample> = from_py(samples)?;
        Ok(Self {
            inner: record_demo(&raw, rate).map_err(value_err)?,
        })
    }

    /// The scripted demonstration shipped with a bundled scenario.
    #[staticmethod]
    #[pyo3(signature = (name, rate = DEFAULT_RECORD_RATE_HZ))]
    fn bundled(name: &str, rate: f64) -> PyResult<Self> {
        let (_, script) =
            bundled(name).ok_or_else(|| value_err(format!("no bundled scenario `{name}`")))?;
        Ok(Self {
            inner: script.record(rate).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: persist::load(path).map_err(persist_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        persist::save(&self.inner, path).map_err(persist_err)
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration()
    }

    #[getter]
    fn grasp_index(&self) -> Option<usize> {
        self.inner.grasp_index()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner
            .positions()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    fn samples(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.samples)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }
}

/// A trained motion policy.
#[pyclass(name = "Policy", module = "pickteach")]
pub struct PyPolicy {
    inner: MudsPolicy,
}

#[pymethods]
impl PyPolicy {
    /// Fits a policy; `config` is a training configuration dict.
    #[staticmethod]
    #[pyo3(signature = (demos, config = None))]
    fn train(
        demos: Vec<PyRef<'_, PyDemonstration>>,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let config = train_config_arg(config)?;
        Ok(Self {
            inner: train_policy(&demos_arg(&demos), &config).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: persist::load(path).map_err(persist_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        persist::save(&self.inner, path).map_err(persist_err)
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames().len()
    }

    /// Attractor command at a world position for the given plant stiffness.
    #[pyo3(signature = (x, stiffness, frame = 0))]
    fn compute_attractor(
        &self,
        py: Python<'_>,
        x: Vec<f64>,
        stiffness: Vec<f64>,
        frame: usize,
    ) -> PyResult<Py<PyAny>> {
        let cmd = self
            .inner
            .compute_attractor(
                frame,
                &vec3(&x).map_err(value_err)?,
                &vec3(&stiffness).map_err(value_err)?,
            )
            .map_err(value_err)?;
        to_py(py, &cmd)
    }

    #[pyo3(signature = (x, frame = 0))]
    fn variance(&self, x: Vec<f64>, frame: usize) -> PyResult<f64> {
        self.inner
            .variance(frame, &vec3(&x).map_err(value_err)?)
            .map_err(value_err)
    }

    /// Spreads a correction into one model: `target` is `delta`, `gamma` or `width`.
    #[pyo3(signature = (target, x, channel, epsilon, frame = 0))]
    fn apply_correction(
        &mut self,
        target: &str,
        x: Vec<f64>,
        channel: usize,
        epsilon: f64,
        frame: usize,
    ) -> PyResult<()> {
        let target: CorrectionTarget = serde_json::from_value(target.into()).map_err(value_err)?;
        self.inner
            .apply_correction(
                frame,
                target,
                &vec3(&x).map_err(value_err)?,
                channel,
                epsilon,
            )
            .map_err(value_err)
    }

    /// One uncorrected rollout in a scenario (name or dict).
    #[pyo3(signature = (scenario, seed = 0))]
    fn rollout(
        &self,
        py: Python<'_>,
        scenario: &Bound<'_, PyAny>,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let scenario = scenario_arg(scenario)?;
        let record = py
            .detach(|| experiment::rollout(&self.inner, &scenario, &RoundConfig::seeded(seed)))
            .map_err(value_err)?;
        to_py(py, &round_summary(&record))
    }

    fn __eq__(&self, other: PyRef<'_, PyPolicy>) -> bool {
        self.inner == other.inner
    }
}

/// Demonstrations, the trained policy and every corrected round.
#[pyclass(name = "TrainingSession", module = "pickteach")]
pub struct PyTrainingSession {
    inner: TrainingSession,
}

#[pymethods]
impl PyTrainingSession {
    #[staticmethod]
    #[pyo3(signature = (demos, config = None))]
    fn train(
        demos: Vec<PyRef<'_, PyDemonstration>>,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let config = train_config_arg(config)?;
        Ok(Self {
            inner: TrainingSession::train(demos_arg(&demos), config).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: persist::load(path).map_err(persist_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        persist::save(&self.inner, path).map_err(persist_err)
    }

    /// Runs and records a round without live corrections.
    #[pyo3(signature = (scenario, seed = 0))]
    fn run_round(
        &mut self,
        py: Python<'_>,
        scenario: &Bound<'_, PyAny>,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let scenario = scenario_arg(scenario)?;
        let inner = &mut self.inner;
        let summary = py
            .detach(|| {
                inner
                    .run_round(&scenario, &RoundConfig::seeded(seed), &mut NoCorrections)
                    .map(round_summary)
            })
            .map_err(value_err)?;
        to_py(py, &summary)
    }

    /// Re-runs every recorded round from the initial policy.
    fn replay(&self, py: Python<'_>) -> PyResult<PyPolicy> {
        let policy = py.detach(|| self.inner.replay()).map_err(value_err)?;
        Ok(PyPolicy { inner: policy })
    }

    #[getter]
    fn policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.inner.policy.clone(),
        }
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds.len()
    }
}

/// Names of the bundled scenarios.
#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    BUNDLED.to_vec()
}

/// A scenario as a dict, ready to edit and pass back.
#[pyfunction]
fn scenario(py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &scenario_from(name).map_err(value_err)?)
}

/// Runs an experiment spec (dict) and returns the full report.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let spec: ExperimentSpec = from_py(spec)?;
    let report = py
        .detach(|| experiment::run_experiment(&spec))
        .map_err(value_err)?;
    to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "pickteach")]
pub fn pickteach_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGpModel>()?;
    m.add_class::<PyDemonstration>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrainingSession>()?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
