use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fdi_qcd::gaussian::ConditionalLaw;
use fdi_qcd::harness::sweep::{run_calibration, run_sweep, CurvePoint};
use fdi_qcd::harness::{Detector, DetectorSelection, Experiment, ExperimentConfig, Stream};
use fdi_qcd::kcif::run_filters;
use fdi_qcd::validate;
use nalgebra::{DMatrix, DVector};

fn err(e: fdi_qcd::Error) -> PyErr {
    match e {
        fdi_qcd::Error::Config(_)
        | fdi_qcd::Error::InvalidParameter(_)
        | fdi_qcd::Error::Dimension(_)
        | fdi_qcd::Error::Topology(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn stream(name: &str) -> PyResult<Stream> {
    Ok(match name {
        "bayes" | "bayes-evaluation" => Stream::BayesEvaluation,
        "bayes-calibration" => Stream::BayesCalibration,
        "no-attack" | "no-attack-evaluation" => Stream::NoAttackEvaluation,
        "no-attack-calibration" => Stream::NoAttackCalibration,
        "fixed" => Stream::FixedOnset,
        other => return Err(PyValueError::new_err(format!("unknown stream {other:?}"))),
    })
}

fn selection(detectors: Option<&str>, default: &DetectorSelection) -> PyResult<DetectorSelection> {
    match detectors {
        Some(d) => DetectorSelection::parse(d).map_err(err),
        None => Ok(default.clone()),
    }
}

fn vectors(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    fdi_qcd::linalg::from_rows(&rows).map_err(err)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn point_dict<'py>(py: Python<'py>, p: &CurvePoint) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("detector", p.detector.name())?;
    d.set_item("node", p.node + 1)?;
    d.set_item("target", p.target)?;
    d.set_item("achieved", p.achieved)?;
    d.set_item("achieved_tail", p.achieved_tail)?;
    d.set_item("mean_delay", p.mean_delay)?;
    d.set_item("threshold", p.threshold)?;
    d.set_item("detection_rate", p.detection_rate)?;
    d.set_item("misidentification", p.misidentification)?;
    d.set_item("censored", p.censored)?;
    Ok(d)
}

/// A configured experiment: model, filter gains and precompiled laws.
#[pyclass(name = "Experiment", module = "fdiqcd")]
struct PyExperiment {
    inner: Experiment,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml(text).map_err(err)?;
        Ok(Self {
            inner: Experiment::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(Path::new(path)).map_err(err)?;
        Ok(Self {
            inner: Experiment::new(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.config.seed
    }

    fn config_toml(&self) -> String {
        self.inner.config.to_toml()
    }

    /// States, observations, filter estimates and onset of one trial.
    #[pyo3(signature = (stream="bayes", trial=0))]
    fn simulate<'py>(&self, py: Python<'py>, stream: &str, trial: usize) -> PyResult<Bound<'py, PyDict>> {
        let traj = self.inner.trajectory(self::stream(stream)?, trial).map_err(err)?;
        let est = run_filters(&self.inner.model, &self.inner.schedule, &traj.observations).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("states", vectors(&traj.states))?;
        d.set_item("observations", traj.observations.iter().map(|o| vectors(o)).collect::<Vec<_>>())?;
        d.set_item("estimates", est.iter().map(|e| vectors(e)).collect::<Vec<_>>())?;
        d.set_item("onset", traj.onset.time())?;
        d.set_item("attacked", traj.attacked.map(|l| l + 1))?;
        Ok(d)
    }

    /// Per-round detector statistics of one trial: `{detector: [node][t]}`.
    #[pyo3(signature = (stream="bayes", trial=0, detectors=None))]
    fn traces<'py>(&self, py: Python<'py>, stream: &str, trial: usize, detectors: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let sel = selection(detectors, &self.inner.config.detectors)?;
        let tr = self.inner.trial_traces(self::stream(stream)?, trial, &sel).map_err(err)?;
        let d = PyDict::new(py);
        for det in Detector::ALL.into_iter().filter(|det| det.enabled(&sel)) {
            let stats: Vec<Vec<f64>> = tr.get(det).iter().map(|s| s.stat.clone()).collect();
            d.set_item(det.name(), stats)?;
        }
        Ok(d)
    }

    /// Calibrated thresholds: a list of
    /// `(detector, node, target_kind, target, final_threshold, tail_rate)`.
    #[pyo3(signature = (trials=None, detectors=None))]
    fn calibrate(&self, trials: Option<usize>, detectors: Option<&str>) -> PyResult<Vec<(String, usize, String, f64, f64, f64)>> {
        let sel = selection(detectors, &self.inner.config.detectors)?;
        let runs = run_calibration(&self.inner, trials.unwrap_or(self.inner.config.trials), &sel).map_err(err)?;
        Ok(runs
            .iter()
            .map(|r| {
                let kind = match r.target {
                    fdi_qcd::harness::calibrate::CalibrationTarget::Pfa(_) => "pfa",
                    fdi_qcd::harness::calibrate::CalibrationTarget::RunLength(_) => "arl",
                };
                (
                    r.detector.name().to_string(),
                    r.node + 1,
                    kind.to_string(),
                    r.target.value(),
                    r.trace.final_threshold(),
                    r.trace.tail_mean(0.2),
                )
            })
            .collect())
    }

    /// Calibration plus evaluation: `{"pfa": [...], "far": [...]}` of
    /// operating-point dicts.
    #[pyo3(signature = (trials=None, detectors=None))]
    fn sweep<'py>(&self, py: Python<'py>, trials: Option<usize>, detectors: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let sel = selection(detectors, &self.inner.config.detectors)?;
        let res = py
            .detach(|| run_sweep(&self.inner, trials.unwrap_or(self.inner.config.trials), &sel))
            .map_err(err)?;
        let d = PyDict::new(py);
        let pfa = res.pfa.iter().map(|p| point_dict(py, p)).collect::<PyResult<Vec<_>>>()?;
        let far = res.far.iter().map(|p| point_dict(py, p)).collect::<PyResult<Vec<_>>>()?;
        d.set_item("pfa", pfa)?;
        d.set_item("far", far)?;
        Ok(d)
    }
}

/// Conditions a zero-mean Gaussian `x` on `r`: returns the regression gain
/// and the conditional covariance.
#[pyfunction]
fn condition(cov_xx: Vec<Vec<f64>>, cov_xr: Vec<Vec<f64>>, cov_rr: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let law = ConditionalLaw::new(&matrix(cov_xx)?, &matrix(cov_xr)?, &matrix(cov_rr)?).map_err(err)?;
    Ok((rows(&law.gain), rows(&law.cov)))
}

/// Runs the oracle suites: a list of `(name, passed, value, tolerance, detail)`.
#[pyfunction]
#[pyo3(signature = (mc_trials=20_000, seed=1))]
fn validate_all(py: Python<'_>, mc_trials: usize, seed: u64) -> Vec<(String, bool, f64, f64, String)> {
    py.detach(|| validate::run_all(mc_trials, seed))
        .into_iter()
        .map(|r| (r.name, r.passed, r.value, r.tolerance, r.detail))
        .collect()
}

#[pymodule]
fn fdiqcd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(condition, m)?)?;
    m.add_function(wrap_pyfunction!(validate_all, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
