//! Monte Carlo orchestration: trial streams, threshold-free statistic
//! traces, online threshold calibration, metrics and CSV emission.
//!
//! Every trial records the full per-round statistic of every enabled
//! detector at every node. Stopping under any threshold is a first
//! crossing of that trace, so calibration and evaluation replay cached
//! traces instead of re-running filters.

pub mod calibrate;
pub mod config;
pub mod metrics;
pub mod output;
pub mod sweep;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{update_lambda, BayesDetectorState, BayesEvaluator};
use crate::error::{Error, Result};
use crate::kcif::{run_filters, FilterSchedule};
use crate::model::{AttackModel, Onset, SystemModel};
use crate::moments::{AttackContext, MomentHistory, MomentMode};
use crate::nonbayes::{innovation, Chi2State, InnovationTables, LlrWindow};
use crate::sim::{generate_trajectory, sample_attack_onset, Trajectory};
use crate::tables::{LawTables, TrialData};

pub use calibrate::{calibrate_threshold, CalibrationTarget, StepSequence, ThresholdScale};
pub use config::{DetectorSelection, ExperimentConfig};
pub use metrics::{aggregate_metrics, run_length_far, MetricSummary, Outcome, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Detector {
    Bayes,
    Msprt,
    Glr,
    Chi2,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::Bayes, Detector::Msprt, Detector::Glr, Detector::Chi2];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Bayes => "bayes",
            Detector::Msprt => "msprt",
            Detector::Glr => "glr",
            Detector::Chi2 => "chi2",
        }
    }

    pub fn enabled(self, sel: &DetectorSelection) -> bool {
        match self {
            Detector::Bayes => sel.bayes,
            Detector::Msprt => sel.msprt,
            Detector::Glr => sel.glr,
            Detector::Chi2 => sel.chi2,
        }
    }
}

/// Independent trial streams. Trial `k` of a stream is seeded with
/// `seed + k` on the stream's own ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Geometric onset at the configured sensor, used for PFA calibration.
    BayesCalibration,
    /// Same law as `BayesCalibration`, used to evaluate final thresholds.
    BayesEvaluation,
    NoAttackCalibration,
    NoAttackEvaluation,
    /// Attack from the configured fixed onset, used for non-Bayesian delays.
    FixedOnset,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::BayesCalibration => 1,
            Stream::BayesEvaluation => 2,
            Stream::NoAttackCalibration => 3,
            Stream::NoAttackEvaluation => 4,
            Stream::FixedOnset => 5,
        }
    }
}

pub fn trial_rng(seed: u64, stream: Stream, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
    rng.set_stream(stream.id());
    rng
}

/// Marks a round without an identification.
pub const NO_IDENT: u32 = u32::MAX;

/// Per-round statistic of one detector at one node, in the units its
/// threshold is compared in (log-odds for the Bayesian detector).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatTrace {
    pub stat: Vec<f64>,
    pub ident: Vec<u32>,
}

impl StatTrace {
    fn with_capacity(n: usize) -> Self {
        Self {
            stat: Vec::with_capacity(n),
            ident: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, stat: f64, ident: Option<usize>) {
        self.stat.push(stat);
        self.ident.push(ident.map_or(NO_IDENT, |v| v as u32));
    }

    /// First round `t` (1-based) with `stat ≥ threshold`, and the sensor
    /// identified there.
    pub fn first_crossing(&self, threshold: f64) -> Option<(usize, Option<usize>)> {
        self.stat.iter().position(|&s| s >= threshold).map(|p| {
            let id = self.ident[p];
            (p + 1, (id != NO_IDENT).then_some(id as usize))
        })
    }
}

/// Threshold-free traces of one trial; each detector vector is indexed by
/// node and empty when the detector was not run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialTraces {
    pub index: usize,
    pub horizon: usize,
    pub onset: Option<usize>,
    pub attacked: Option<usize>,
    pub bayes: Vec<StatTrace>,
    pub msprt: Vec<StatTrace>,
    pub glr: Vec<StatTrace>,
    pub chi2: Vec<StatTrace>,
}

impl TrialTraces {
    pub fn get(&self, d: Detector) -> &[StatTrace] {
        match d {
            Detector::Bayes => &self.bayes,
            Detector::Msprt => &self.msprt,
            Detector::Glr => &self.glr,
            Detector::Chi2 => &self.chi2,
        }
    }
}

/// Everything that depends only on the configuration: model, filter gains,
/// law tables and innovation whitening.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub schedule: FilterSchedule,
    pub tables: LawTables,
    pub innovations: InnovationTables,
    pub sigma: DMatrix<f64>,
    /// Table index of the known injected covariance.
    pub sigma_index: usize,
    /// Table indices of the GLR candidates.
    pub theta_indices: Vec<usize>,
    pub nonbayes_window: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.system_model()?;
        let horizon = config.horizon;
        let schedule = FilterSchedule::new(&model, config.filter.gain, horizon)?;
        let sigma = config.sigma()?;
        AttackModel::new(config.attacked(), Onset::Never, sigma.clone())?.validate_for(&model)?;
        let det = &config.detectors;
        let nonbayes_window = config.nonbayes.effective_window();

        let mut sigmas: Vec<(DMatrix<f64>, bool)> = Vec::new();
        let sigma_index = 0;
        sigmas.push((sigma.clone(), det.bayes));
        let mut theta_indices = Vec::new();
        if det.glr {
            for theta in config.theta() {
                match sigmas.iter().position(|(s, _)| *s == theta) {
                    Some(k) => theta_indices.push(k),
                    None => {
                        theta_indices.push(sigmas.len());
                        sigmas.push((theta, false));
                    }
                }
            }
        }
        let mut window = 1;
        if det.bayes {
            window = window.max(config.bayes.onset_window);
        }
        if det.msprt || det.glr {
            window = window.max(nonbayes_window + 1);
        }
        let tables = LawTables::build(&model, &schedule, &sigmas, horizon, window, config.filter.moments)?;
        let exact = MomentHistory::new(
            &model,
            &schedule,
            &AttackContext::none(model.obs_dim()),
            horizon,
            MomentMode::Exact,
        )?;
        let innovations = InnovationTables::new(&exact, &model, horizon)?;
        Ok(Self {
            config,
            model,
            schedule,
            tables,
            innovations,
            sigma,
            sigma_index,
            theta_indices,
            nonbayes_window,
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn num_nodes(&self) -> usize {
        self.model.num_nodes()
    }

    pub fn hypotheses(&self, d: Detector, i: usize) -> Vec<usize> {
        let keep_self = match d {
            Detector::Bayes => self.config.bayes.include_self_hypothesis,
            _ => self.config.nonbayes.include_self_hypothesis,
        };
        (0..self.num_nodes()).filter(|&l| keep_self || l != i).collect()
    }

    /// Attack model of trial `k` of a stream.
    pub fn attack_for(&self, stream: Stream, rng: &mut ChaCha8Rng) -> Result<AttackModel> {
        let l = self.config.attacked();
        match stream {
            Stream::BayesCalibration | Stream::BayesEvaluation => {
                let tau = sample_attack_onset(self.config.bayes.rho, rng)?;
                AttackModel::new(l, Onset::At(tau), self.sigma.clone())
            }
            Stream::NoAttackCalibration | Stream::NoAttackEvaluation => Ok(AttackModel::none(self.model.obs_dim())),
            Stream::FixedOnset => AttackModel::new(l, Onset::At(self.config.nonbayes.onset), self.sigma.clone()),
        }
    }

    pub fn trajectory(&self, stream: Stream, k: usize) -> Result<Trajectory> {
        let mut rng = trial_rng(self.config.seed, stream, k);
        let attack = self.attack_for(stream, &mut rng)?;
        generate_trajectory(&self.model, &attack, self.horizon(), &mut rng)
    }

    /// Runs the filters on trial `k` and records the statistics of the
    /// selected detectors at every node.
    pub fn trial_traces(&self, stream: Stream, k: usize, sel: &DetectorSelection) -> Result<TrialTraces> {
        let traj = self.trajectory(stream, k)?;
        self.traces_for(&traj, k, sel)
    }

    pub fn traces_for(&self, traj: &Trajectory, k: usize, sel: &DetectorSelection) -> Result<TrialTraces> {
        let model = &self.model;
        let n = model.num_nodes();
        let horizon = traj.horizon();
        if horizon > self.horizon() {
            return Err(Error::InvalidParameter(format!(
                "trajectory horizon {horizon} exceeds table horizon {}",
                self.horizon()
            )));
        }
        let estimates = run_filters(model, &self.schedule, &traj.observations)?;
        let any_law = sel.bayes || sel.msprt || sel.glr;
        let data = any_law.then(|| TrialData::new(model, &estimates, &traj.observations, sel.bayes));
        let mut out = TrialTraces {
            index: k,
            horizon,
            onset: traj.onset.time(),
            attacked: traj.attacked,
            ..TrialTraces::default()
        };
        if sel.bayes {
            let data = data.as_ref().expect("built for law detectors");
            let cfg = &self.config.bayes;
            let mut eval = BayesEvaluator::new(cfg.rho, cfg.onset_window, self.sigma_index, horizon)?;
            let mut ratios = Vec::new();
            for i in 0..n {
                let hyps = self.hypotheses(Detector::Bayes, i);
                let mut state = BayesDetectorState::new(hyps.clone(), cfg.rho, 1.0)?;
                let mut trace = StatTrace::with_capacity(horizon);
                for t in 1..=horizon {
                    eval.log_ratios(&self.tables, data.at(t, i), i, t, &hyps, &mut ratios);
                    state = update_lambda(&state, &ratios)?;
                    let (best, kmax) = state.max_log_lambda();
                    trace.push(best, Some(hyps[kmax]));
                }
                out.bayes.push(trace);
            }
        }
        if sel.msprt || sel.glr {
            let data = data.as_ref().expect("built for law detectors");
            for i in 0..n {
                let hyps = self.hypotheses(Detector::Msprt, i);
                let mut msprt = LlrWindow::new(self.nonbayes_window, hyps.len())?;
                let mut glr: Vec<LlrWindow> = self
                    .theta_indices
                    .iter()
                    .map(|_| LlrWindow::new(self.nonbayes_window, hyps.len()))
                    .collect::<Result<_>>()?;
                let mut tm = StatTrace::with_capacity(horizon);
                let mut tg = StatTrace::with_capacity(horizon);
                for t in 1..=horizon {
                    let d = data.at(t, i);
                    let pre = self.tables.clean(t, i).own_log_pdf(d).0;
                    let llr = |s: usize, k: usize, j: usize| self.tables.attacked(s, hyps[j], k, t, i).own_log_pdf(d).0 - pre;
                    if sel.msprt {
                        msprt.push(|k, j| llr(self.sigma_index, k, j));
                        let w = msprt.msprt_stat();
                        tm.push(w.stat, Some(hyps[w.hypothesis]));
                    }
                    if sel.glr {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for (win, &s) in glr.iter_mut().zip(&self.theta_indices) {
                            win.push(|k, j| llr(s, k, j));
                            let w = win.max_stat();
                            if w.stat > best.0 {
                                best = (w.stat, w.hypothesis);
                            }
                        }
                        tg.push(best.0, Some(hyps[best.1]));
                    }
                }
                if sel.msprt {
                    out.msprt.push(tm);
                }
                if sel.glr {
                    out.glr.push(tg);
                }
            }
        }
        if sel.chi2 {
            for i in 0..n {
                let mut state = Chi2State::new(self.config.chi2.window, f64::INFINITY)?;
                let mut trace = StatTrace::with_capacity(horizon);
                for t in 1..=horizon {
                    let z = innovation(model, traj.observation(t, i), &estimates[t - 1][i], i);
                    let (stat, _) = state.push_quadratic(self.innovations.quadratic(t, i, z.as_slice()));
                    trace.push(stat, None);
                }
                out.chi2.push(trace);
            }
        }
        Ok(out)
    }

    /// Traces of trials `0..count` of a stream, computed in parallel and
    /// returned in trial order.
    pub fn stream_traces(&self, stream: Stream, count: usize, sel: &DetectorSelection) -> Result<Vec<TrialTraces>> {
        par_map(count, |k| self.trial_traces(stream, k, sel))
    }

    /// One full trial with fixed thresholds (in statistic units, indexed
    /// `[detector][node]`; `None` disables the detector).
    pub fn run_trial(&self, stream: Stream, k: usize, thresholds: &Thresholds) -> Result<TrialRecord> {
        let traces = self.trial_traces(stream, k, &thresholds.selection())?;
        Ok(TrialRecord::from_traces(&traces, thresholds))
    }
}

/// Per-detector, per-node thresholds in statistic units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Thresholds {
    pub entries: Vec<(Detector, Vec<f64>)>,
}

impl Thresholds {
    pub fn uniform(detectors: &[Detector], nodes: usize, value: f64) -> Self {
        Self {
            entries: detectors.iter().map(|&d| (d, vec![value; nodes])).collect(),
        }
    }

    pub fn get(&self, d: Detector) -> Option<&[f64]> {
        self.entries.iter().find(|(e, _)| *e == d).map(|(_, v)| v.as_slice())
    }

    pub fn selection(&self) -> DetectorSelection {
        let has = |d| self.get(d).is_some();
        DetectorSelection {
            bayes: has(Detector::Bayes),
            msprt: has(Detector::Msprt),
            glr: has(Detector::Glr),
            chi2: has(Detector::Chi2),
        }
    }
}

/// Deterministic parallel map over `0..count`; results keep index order.
pub fn par_map<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |v| v.get()).min(count.max(1));
    if workers <= 1 {
        return (0..count).map(f).collect();
    }
    let f = &f;
    let mut chunks: Vec<Vec<Result<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = count * w / workers;
                let hi = count * (w + 1) / workers;
                scope.spawn(move || (lo..hi).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial worker panicked")).collect()
    });
    chunks.iter_mut().flat_map(std::mem::take).collect()
}
