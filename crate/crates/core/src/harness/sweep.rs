//! Calibrate every enabled detector at every node for each target, then
//! evaluate the final thresholds on independent trial streams.

use super::calibrate::{calibrate_on_traces, CalibrationTarget, CalibrationTrace, StepSequence, ThresholdScale};
use super::metrics::{aggregate_metrics, run_length_far, TrialRecord};
use super::{par_map, Detector, DetectorSelection, Experiment, Stream, Thresholds, TrialTraces};
use crate::error::{Error, Result};

/// Share of trailing calibration trials used for the in-stream rate.
pub const TAIL_FRACTION: f64 = 0.2;

/// One calibrated operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub detector: Detector,
    /// 0-based node.
    pub node: usize,
    /// `α` for PFA curves, `1/arl` for FAR curves.
    pub target: f64,
    /// PFA or FAR of the final threshold on the evaluation stream.
    pub achieved: f64,
    /// In-stream rate over the trailing calibration trials.
    pub achieved_tail: f64,
    pub mean_delay: Option<f64>,
    pub threshold: f64,
    pub detection_rate: f64,
    pub misidentification: Option<f64>,
    /// Share of no-attack runs that never stopped (FAR curves only).
    pub censored: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    pub detector: Detector,
    pub node: usize,
    pub target: CalibrationTarget,
    pub trace: CalibrationTrace,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    /// Bayesian detector and χ² calibrated to PFA targets.
    pub pfa: Vec<CurvePoint>,
    /// MSPRT, GLR and χ² calibrated to run-length targets.
    pub far: Vec<CurvePoint>,
    pub calibrations: Vec<CalibrationRun>,
}

impl SweepResult {
    pub fn points(&self, family: &[CurvePoint], d: Detector, node: usize) -> Vec<CurvePoint> {
        family.iter().filter(|p| p.detector == d && p.node == node).cloned().collect()
    }
}

struct Job {
    detector: Detector,
    node: usize,
    target: CalibrationTarget,
}

fn calibration_params(exp: &Experiment, d: Detector, target: CalibrationTarget) -> (f64, StepSequence, ThresholdScale) {
    let cal = &exp.config.calibration;
    match (d, target) {
        (Detector::Bayes, _) => (exp.config.bayes.initial_threshold, StepSequence { a0: cal.a0_bayes }, ThresholdScale::Probability),
        (Detector::Chi2, CalibrationTarget::Pfa(_)) => {
            (exp.config.chi2.initial_threshold, StepSequence { a0: cal.a0_chi2_pfa }, ThresholdScale::Statistic)
        }
        (Detector::Chi2, CalibrationTarget::RunLength(_)) => {
            (exp.config.chi2.initial_threshold, StepSequence { a0: cal.a0_run_length }, ThresholdScale::Statistic)
        }
        _ => (exp.config.nonbayes.initial_threshold, StepSequence { a0: cal.a0_run_length }, ThresholdScale::LogRatio),
    }
}

fn calibrate_jobs(exp: &Experiment, jobs: &[Job], traces: &[TrialTraces]) -> Result<Vec<CalibrationRun>> {
    par_map(jobs.len(), |k| {
        let job = &jobs[k];
        let (init, steps, scale) = calibration_params(exp, job.detector, job.target);
        let refs: Vec<_> = traces.iter().map(|t| (&t.get(job.detector)[job.node], t.onset)).collect();
        Ok(CalibrationRun {
            detector: job.detector,
            node: job.node,
            target: job.target,
            trace: calibrate_on_traces(&refs, exp.horizon(), init, job.target, steps, scale),
        })
    })
}

fn jobs_for(detectors: &[Detector], targets: &[CalibrationTarget], nodes: usize) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &detector in detectors {
        for &target in targets {
            for node in 0..nodes {
                jobs.push(Job { detector, node, target });
            }
        }
    }
    jobs
}

fn records(traces: &[TrialTraces], d: Detector, node: usize, stat_threshold: f64, nodes: usize) -> Vec<TrialRecord> {
    let mut per_node = vec![f64::INFINITY; nodes];
    per_node[node] = stat_threshold;
    let th = Thresholds {
        entries: vec![(d, per_node)],
    };
    traces.iter().map(|t| TrialRecord::from_traces(t, &th)).collect()
}

fn selection(sel: &DetectorSelection, family: &[Detector]) -> DetectorSelection {
    let keep = |d: Detector| d.enabled(sel) && family.contains(&d);
    DetectorSelection {
        bayes: keep(Detector::Bayes),
        msprt: keep(Detector::Msprt),
        glr: keep(Detector::Glr),
        chi2: keep(Detector::Chi2),
    }
}

const PFA_FAMILY: [Detector; 2] = [Detector::Bayes, Detector::Chi2];
const FAR_FAMILY: [Detector; 3] = [Detector::Msprt, Detector::Glr, Detector::Chi2];

/// Calibrates every enabled detector at every node on the calibration
/// streams only.
pub fn run_calibration(exp: &Experiment, trials: usize, sel: &DetectorSelection) -> Result<Vec<CalibrationRun>> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let mut runs = Vec::new();
    let pfa = enabled(&PFA_FAMILY, sel);
    if !pfa.is_empty() {
        let calib = exp.stream_traces(Stream::BayesCalibration, trials, &selection(sel, &PFA_FAMILY))?;
        runs.extend(calibrate_jobs(exp, &jobs_for(&pfa, &pfa_targets(exp)?, exp.num_nodes()), &calib)?);
    }
    let far = enabled(&FAR_FAMILY, sel);
    if !far.is_empty() {
        let calib = exp.stream_traces(Stream::NoAttackCalibration, trials, &selection(sel, &FAR_FAMILY))?;
        runs.extend(calibrate_jobs(exp, &jobs_for(&far, &far_targets(exp)?, exp.num_nodes()), &calib)?);
    }
    Ok(runs)
}

fn enabled(family: &[Detector], sel: &DetectorSelection) -> Vec<Detector> {
    family.iter().copied().filter(|d| d.enabled(sel)).collect()
}

fn pfa_targets(exp: &Experiment) -> Result<Vec<CalibrationTarget>> {
    if exp.config.bayes.alphas.is_empty() {
        return Err(Error::Config("bayes.alphas is empty".into()));
    }
    Ok(exp.config.bayes.alphas.iter().map(|&a| CalibrationTarget::Pfa(a)).collect())
}

fn far_targets(exp: &Experiment) -> Result<Vec<CalibrationTarget>> {
    if exp.config.nonbayes.arl_targets.is_empty() {
        return Err(Error::Config("nonbayes.arl_targets is empty".into()));
    }
    Ok(exp.config.nonbayes.arl_targets.iter().map(|&g| CalibrationTarget::RunLength(g)).collect())
}

/// Runs the full protocol with `trials` trials per stream: calibration,
/// then evaluation of the final thresholds on independent streams.
pub fn run_sweep(exp: &Experiment, trials: usize, sel: &DetectorSelection) -> Result<SweepResult> {
    let runs = run_calibration(exp, trials, sel)?;
    let n = exp.num_nodes();
    let horizon = exp.horizon();
    let mut out = SweepResult::default();

    if runs.iter().any(|r| matches!(r.target, CalibrationTarget::Pfa(_))) {
        log::info!("evaluating pfa thresholds on {trials} trials");
        let eval = exp.stream_traces(Stream::BayesEvaluation, trials, &selection(sel, &PFA_FAMILY))?;
        for run in runs.iter().filter(|r| matches!(r.target, CalibrationTarget::Pfa(_))) {
            let (_, _, scale) = calibration_params(exp, run.detector, run.target);
            let b = run.trace.final_threshold();
            let m = aggregate_metrics(&records(&eval, run.detector, run.node, scale.to_stat(b), n), run.detector, run.node)?;
            out.pfa.push(CurvePoint {
                detector: run.detector,
                node: run.node,
                target: run.target.value(),
                achieved: m.pfa,
                achieved_tail: run.trace.tail_mean(TAIL_FRACTION),
                mean_delay: m.mean_delay,
                threshold: b,
                detection_rate: m.detection_rate(),
                misidentification: m.misidentification,
                censored: None,
            });
        }
    }

    if runs.iter().any(|r| matches!(r.target, CalibrationTarget::RunLength(_))) {
        log::info!("evaluating run-length thresholds on {trials} no-attack and {trials} attacked trials");
        let s = selection(sel, &FAR_FAMILY);
        let eval = exp.stream_traces(Stream::NoAttackEvaluation, trials, &s)?;
        let attacked = exp.stream_traces(Stream::FixedOnset, trials, &s)?;
        for run in runs.iter().filter(|r| matches!(r.target, CalibrationTarget::RunLength(_))) {
            let b = run.trace.final_threshold();
            let (far, censored) = run_length_far(eval.iter().map(|t| &t.get(run.detector)[run.node]), b, horizon);
            let m = aggregate_metrics(&records(&attacked, run.detector, run.node, b, n), run.detector, run.node)?;
            out.far.push(CurvePoint {
                detector: run.detector,
                node: run.node,
                target: 1.0 / run.target.value(),
                achieved: far,
                achieved_tail: 1.0 / run.trace.tail_mean(TAIL_FRACTION),
                mean_delay: m.mean_delay,
                threshold: b,
                detection_rate: m.detection_rate(),
                misidentification: m.misidentification,
                censored: Some(censored),
            });
        }
    }
    out.calibrations = runs;
    Ok(out)
}
