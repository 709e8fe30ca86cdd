//! Python bindings for the federated causal-discovery pipeline.
//!
//! Tensors cross the boundary as flat row-major `list[float]` /
//! `list[int]` plus explicit shapes, so the module needs nothing beyond
//! the Python standard library on the consuming side. Scenario and
//! experiment configuration arrive as TOML strings in the same schema the
//! command-line tool uses.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ddic_core::config::ExperimentConfig;
use ddic_core::dism::{self, DismConfig, PriorSet, ThresholdSpec};
use ddic_core::error::Error;
use ddic_core::fed;
use ddic_core::metrics;
use ddic_core::synth::{self, GroundTruth, ScenarioSpec, TimeSeriesPanel};
use ndarray::Array3;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        Error::Format(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
    }
}

/// One client's panel: `n_samples x steps x vars`, row-major flat values.
#[pyclass(name = "Panel", from_py_object)]
#[derive(Clone)]
struct PyPanel {
    #[pyo3(get)]
    client_id: usize,
    #[pyo3(get)]
    n_samples: usize,
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    vars: usize,
    #[pyo3(get)]
    values: Vec<f64>,
}

impl PyPanel {
    fn from_core(p: &TimeSeriesPanel) -> Self {
        PyPanel {
            client_id: p.client_id,
            n_samples: p.n_samples(),
            steps: p.steps(),
            vars: p.vars(),
            values: p.values.iter().copied().collect(),
        }
    }

    fn to_core(&self) -> PyResult<TimeSeriesPanel> {
        let values =
            Array3::from_shape_vec((self.n_samples, self.steps, self.vars), self.values.clone())
                .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(TimeSeriesPanel {
            client_id: self.client_id,
            values,
        })
    }
}

#[pymethods]
impl PyPanel {
    #[new]
    fn new(
        client_id: usize,
        n_samples: usize,
        steps: usize,
        vars: usize,
        values: Vec<f64>,
    ) -> PyResult<Self> {
        if values.len() != n_samples * steps * vars {
            return Err(PyValueError::new_err("values length does not match shape"));
        }
        Ok(PyPanel {
            client_id,
            n_samples,
            steps,
            vars,
            values,
        })
    }

    fn value(&self, sample: usize, t: usize, var: usize) -> PyResult<f64> {
        if sample >= self.n_samples || t >= self.steps || var >= self.vars {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.values[(sample * self.steps + t) * self.vars + var])
    }
}

/// Generator output: true tensors and oracle masks, all flat row-major.
#[pyclass(name = "Truth", skip_from_py_object)]
#[derive(Clone)]
struct PyTruth {
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    vars: usize,
    #[pyo3(get)]
    lag: usize,
    /// `[steps, vars, vars]` contemporaneous coefficients.
    #[pyo3(get)]
    w_true: Vec<f64>,
    /// `[lag, vars, vars]` lag coefficients.
    #[pyo3(get)]
    a_true: Vec<f64>,
    #[pyo3(get)]
    oracle_s: Vec<u8>,
    #[pyo3(get)]
    oracle_l: Vec<u8>,
    #[pyo3(get)]
    oracle_s_a: Vec<u8>,
    #[pyo3(get)]
    oracle_l_a: Vec<u8>,
}

impl PyTruth {
    fn from_core(t: &GroundTruth) -> Self {
        let (steps, vars, _) = t.w_true.dim();
        PyTruth {
            steps,
            vars,
            lag: t.a_true.shape()[0],
            w_true: t.w_true.iter().copied().collect(),
            a_true: t.a_true.iter().copied().collect(),
            oracle_s: t.oracle_s.iter().copied().collect(),
            oracle_l: t.oracle_l.iter().copied().collect(),
            oracle_s_a: t.oracle_s_a.iter().copied().collect(),
            oracle_l_a: t.oracle_l_a.iter().copied().collect(),
        }
    }

    fn to_core(&self) -> PyResult<GroundTruth> {
        let shape3 = (self.steps, self.vars, self.vars);
        let lag3 = (self.lag, self.vars, self.vars);
        let arr = |v: &Vec<f64>, s| {
            Array3::from_shape_vec(s, v.clone()).map_err(|e| PyValueError::new_err(e.to_string()))
        };
        let mask = |v: &Vec<u8>, s| {
            Array3::from_shape_vec(s, v.clone()).map_err(|e| PyValueError::new_err(e.to_string()))
        };
        Ok(GroundTruth {
            w_true: arr(&self.w_true, shape3)?,
            a_true: arr(&self.a_true, lag3)?,
            oracle_s: mask(&self.oracle_s, shape3)?,
            oracle_l: mask(&self.oracle_l, shape3)?,
            oracle_s_a: mask(&self.oracle_s_a, lag3)?,
            oracle_l_a: mask(&self.oracle_l_a, lag3)?,
        })
    }
}

/// Mined priors: dynamic hard/soft masks `[steps, vars, vars]` and static
/// lag masks `[lag, vars, vars]`, flat row-major.
#[pyclass(name = "Priors", skip_from_py_object)]
#[derive(Clone)]
struct PyPriors {
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    vars: usize,
    #[pyo3(get)]
    lag: usize,
    #[pyo3(get)]
    s: Vec<u8>,
    #[pyo3(get)]
    l_soft: Vec<u8>,
    #[pyo3(get)]
    s_a: Vec<u8>,
    #[pyo3(get)]
    l_soft_a: Vec<u8>,
    #[pyo3(get)]
    sampled_times: Vec<usize>,
    #[pyo3(get)]
    delta_hard: f64,
    #[pyo3(get)]
    delta_local: f64,
}

impl PyPriors {
    fn from_core(p: &PriorSet) -> Self {
        PyPriors {
            steps: p.steps(),
            vars: p.vars(),
            lag: p.lag(),
            s: p.s.iter().copied().collect(),
            l_soft: p.l_soft.iter().copied().collect(),
            s_a: p.s_a.iter().copied().collect(),
            l_soft_a: p.l_soft_a.iter().copied().collect(),
            sampled_times: p.sampled_times.clone(),
            delta_hard: p.meta.delta_hard,
            delta_local: p.meta.delta_local,
        }
    }
}

/// Fitted graph trajectory: `w_eff [steps, vars, vars]`, `a_eff
/// [lag, vars, vars]`, flat row-major.
#[pyclass(name = "Estimate", skip_from_py_object)]
#[derive(Clone)]
struct PyEstimate {
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    vars: usize,
    #[pyo3(get)]
    lag: usize,
    #[pyo3(get)]
    w_eff: Vec<f64>,
    #[pyo3(get)]
    a_eff: Vec<f64>,
    /// Final global training loss per federated round.
    #[pyo3(get)]
    round_losses: Vec<f64>,
}

/// Evaluation summary; optional scores are `None` when truth is degenerate.
#[pyclass(name = "Report", skip_from_py_object)]
#[derive(Clone)]
struct PyReport {
    #[pyo3(get)]
    auroc_mean: Option<f64>,
    #[pyo3(get)]
    auprc_mean: Option<f64>,
    #[pyo3(get)]
    lag_auroc: Option<f64>,
    #[pyo3(get)]
    shd_total: usize,
    #[pyo3(get)]
    mae: f64,
    #[pyo3(get)]
    rmse: f64,
}

/// Generates a synthetic multi-client dataset from a scenario TOML string.
#[pyfunction]
fn generate(scenario_toml: &str) -> PyResult<(Vec<PyPanel>, PyTruth)> {
    let spec: ScenarioSpec =
        toml::from_str(scenario_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
    spec.validate().map_err(to_py)?;
    let (panels, truth) = synth::generate(&spec).map_err(to_py)?;
    Ok((
        panels.iter().map(PyPanel::from_core).collect(),
        PyTruth::from_core(&truth),
    ))
}

/// Mines prior masks from client panels. `delta_hard`/`delta_local` of
/// `None` request Monte-Carlo null calibration.
#[pyfunction]
#[pyo3(signature = (panels, lag, t_s=1, h=32, sigma=1.0, delta_hard=None, delta_local=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_dism(
    panels: Vec<PyPanel>,
    lag: usize,
    t_s: usize,
    h: usize,
    sigma: f64,
    delta_hard: Option<f64>,
    delta_local: Option<f64>,
    seed: u64,
) -> PyResult<PyPriors> {
    let core_panels: Vec<TimeSeriesPanel> = panels
        .iter()
        .map(|p| p.to_core())
        .collect::<PyResult<_>>()?;
    let spec = |o: Option<f64>| o.map_or(ThresholdSpec::Calibrated, ThresholdSpec::Fixed);
    let cfg = DismConfig {
        t_s,
        h,
        sigma,
        delta_hard: spec(delta_hard),
        delta_local: spec(delta_local),
        seed,
        ..DismConfig::default()
    };
    let (priors, _) = dism::run_dism(&core_panels, lag, &cfg).map_err(to_py)?;
    Ok(PyPriors::from_core(&priors))
}

/// Runs both phases end to end from an experiment config TOML string.
#[pyfunction]
fn run_pipeline(config_toml: &str) -> PyResult<(Vec<PyPanel>, PyTruth, PyPriors, PyEstimate)> {
    let cfg: ExperimentConfig =
        toml::from_str(config_toml).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py)?;
    let mut scenario = cfg.scenario.clone();
    scenario.seed = scenario.seed.wrapping_add(cfg.seed);
    let (panels, truth) = synth::generate(&scenario).map_err(to_py)?;
    let out = fed::run_pipeline(
        &panels,
        scenario.lag,
        &cfg.dism.to_config(cfg.seed),
        &cfg.dcto.to_config(cfg.seed),
    )
    .map_err(to_py)?;
    let estimate = PyEstimate {
        steps: out.estimate.w_eff.shape()[0],
        vars: out.estimate.w_eff.shape()[1],
        lag: out.estimate.a_eff.shape()[0],
        w_eff: out.estimate.w_eff.iter().copied().collect(),
        a_eff: out.estimate.a_eff.iter().copied().collect(),
        round_losses: out.round_logs.iter().map(|l| l.global_loss).collect(),
    };
    Ok((
        panels.iter().map(PyPanel::from_core).collect(),
        PyTruth::from_core(&truth),
        PyPriors::from_core(&out.priors),
        estimate,
    ))
}

/// Scores an estimate against ground truth and a held-out panel.
#[pyfunction]
#[pyo3(signature = (estimate, truth, held_out, shd_threshold=0.1))]
fn evaluate(
    estimate: &PyEstimate,
    truth: &PyTruth,
    held_out: &PyPanel,
    shd_threshold: f64,
) -> PyResult<PyReport> {
    let w_eff = Array3::from_shape_vec(
        (estimate.steps, estimate.vars, estimate.vars),
        estimate.w_eff.clone(),
    )
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let a_eff = Array3::from_shape_vec(
        (estimate.lag, estimate.vars, estimate.vars),
        estimate.a_eff.clone(),
    )
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = metrics::evaluate(
        &w_eff,
        &a_eff,
        &truth.to_core()?,
        &held_out.to_core()?,
        None,
        shd_threshold,
    )
    .map_err(to_py)?;
    Ok(PyReport {
        auroc_mean: report.auroc_mean,
        auprc_mean: report.auprc_mean,
        lag_auroc: report.lag_auroc,
        shd_total: report.shd_total,
        mae: report.mae,
        rmse: report.rmse,
    })
}

#[pymodule]
fn ddic(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyPriors>()?;
    m.add_class::<PyEstimate>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_dism, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
