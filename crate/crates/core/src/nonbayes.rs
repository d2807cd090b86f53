//! Non-Bayesian detection and isolation: windowed MSPRT for a known
//! injected covariance, window-limited GLR over a candidate set, and the
//! windowed χ² test on filter innovations.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::bayes::Decision;
use crate::error::{Error, Result};
use crate::gaussian::CompiledLaw;
use crate::linalg::{jittered_cholesky, symmetrized};
use crate::model::SystemModel;
use crate::moments::MomentHistory;
use crate::tables::{LawTables, NodeData};

/// Default `c_w` in `t_γ = c_w·⌈ln(arl)⌉`.
pub const WINDOW_SCALE: usize = 5;

/// Window size for a target average run length to false alarm.
pub fn default_window(arl_target: f64) -> usize {
    WINDOW_SCALE * arl_target.ln().ceil().max(1.0) as usize
}

/// `log f_{k,t,i,j}(x̂_i(t)) − log f_∞,i(x̂_i(t))` for injected covariance
/// index `s` and onset `k ≤ t`.
pub fn llr_term(tables: &LawTables, s: usize, i: usize, j: usize, t: usize, k: usize, data: &NodeData) -> f64 {
    let (post, _) = tables.attacked(s, j, k, t, i).own_log_pdf(data);
    let (pre, _) = tables.clean(t, i).own_log_pdf(data);
    post - pre
}

/// Result of one window update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStat {
    pub stat: f64,
    pub onset: usize,
    /// Index into the hypothesis list.
    pub hypothesis: usize,
}

/// Cumulative LLR sums `Σ_{t=k}^{n} L^{t,k}_j` for the onsets
/// `k ∈ [max(1, n − t_γ), n]` and each hypothesis `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrWindow {
    capacity: usize,
    hypotheses: usize,
    n: usize,
    entries: VecDeque<(usize, Vec<f64>)>,
}

impl LlrWindow {
    /// `window` is `t_γ`; `t_γ + 1` onsets are kept.
    pub fn new(window: usize, hypotheses: usize) -> Result<Self> {
        if hypotheses == 0 {
            return Err(Error::InvalidParameter("no hypotheses".into()));
        }
        Ok(Self {
            capacity: window,
            hypotheses,
            n: 0,
            entries: VecDeque::with_capacity(window + 1),
        })
    }

    pub fn time(&self) -> usize {
        self.n
    }

    pub fn window(&self) -> usize {
        self.capacity
    }

    /// Advances to `n + 1`; `term(k, j)` supplies `L^{n+1,k}_j`.
    pub fn push(&mut self, mut term: impl FnMut(usize, usize) -> f64) {
        self.n += 1;
        let n = self.n;
        while self.entries.front().is_some_and(|(k, _)| *k + self.capacity < n) {
            self.entries.pop_front();
        }
        self.entries.push_back((n, vec![0.0; self.hypotheses]));
        for (k, cum) in &mut self.entries {
            for (j, c) in cum.iter_mut().enumerate() {
                *c += term(*k, j);
            }
        }
    }

    pub fn onsets(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(k, c)| (*k, c.as_slice()))
    }

    /// `max_k min_j` of the cumulative sums; the hypothesis reported is the
    /// `argmax_j` at the maximising onset. Ties go to the earliest onset
    /// and the lowest hypothesis index.
    pub fn msprt_stat(&self) -> WindowStat {
        let mut best = WindowStat {
            stat: f64::NEG_INFINITY,
            onset: 0,
            hypothesis: 0,
        };
        for (k, cum) in &self.entries {
            let worst = cum.iter().copied().fold(f64::INFINITY, f64::min);
            if worst > best.stat {
                best = WindowStat {
                    stat: worst,
                    onset: *k,
                    hypothesis: argmax(cum),
                };
            }
        }
        best
    }

    /// `max_k max_j` of the cumulative sums.
    pub fn max_stat(&self) -> WindowStat {
        let mut best = WindowStat {
            stat: f64::NEG_INFINITY,
            onset: 0,
            hypothesis: 0,
        };
        for (k, cum) in &self.entries {
            for (j, &c) in cum.iter().enumerate() {
                if c > best.stat {
                    best = WindowStat {
                        stat: c,
                        onset: *k,
                        hypothesis: j,
                    };
                }
            }
        }
        best
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Threshold `b` applied to a window statistic.
pub fn threshold_decision(stat: &WindowStat, threshold: f64, hypotheses: &[usize]) -> Decision {
    if stat.stat >= threshold {
        Decision::Stop {
            identified: hypotheses[stat.hypothesis],
        }
    } else {
        Decision::Continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsprtDetector {
    pub hypotheses: Vec<usize>,
    pub window: LlrWindow,
    pub threshold: f64,
    pub stopped_at: Option<(usize, usize, usize)>,
}

impl MsprtDetector {
    pub fn new(hypotheses: Vec<usize>, window: usize, threshold: f64) -> Result<Self> {
        Ok(Self {
            window: LlrWindow::new(window, hypotheses.len())?,
            hypotheses,
            threshold,
            stopped_at: None,
        })
    }
}

/// Adds the round's terms and stops if the statistic reaches `b`. On a
/// stop the maximising onset and hypothesis are recorded.
pub fn msprt_step(state: &mut MsprtDetector, term: impl FnMut(usize, usize) -> f64) -> (WindowStat, Decision) {
    if let Some((_, k, j)) = state.stopped_at {
        let stat = WindowStat {
            stat: f64::NAN,
            onset: k,
            hypothesis: j,
        };
        return (stat, Decision::Stop { identified: state.hypotheses[j] });
    }
    state.window.push(term);
    let stat = state.window.msprt_stat();
    let d = threshold_decision(&stat, state.threshold, &state.hypotheses);
    if matches!(d, Decision::Stop { .. }) {
        state.stopped_at = Some((state.window.time(), stat.onset, stat.hypothesis));
    }
    (stat, d)
}

/// One [`LlrWindow`] per candidate covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GlrState {
    pub hypotheses: Vec<usize>,
    pub grid: Vec<LlrWindow>,
    pub threshold: f64,
    pub stopped_at: Option<(usize, usize)>,
}

impl GlrState {
    pub fn new(hypotheses: Vec<usize>, grid_size: usize, window: usize, threshold: f64) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::InvalidParameter("candidate set is empty".into()));
        }
        let grid = (0..grid_size)
            .map(|_| LlrWindow::new(window, hypotheses.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hypotheses,
            grid,
            threshold,
            stopped_at: None,
        })
    }

    /// `max_s max_k max_j` over the grid; ties go to the first candidate.
    pub fn stat(&self) -> WindowStat {
        self.grid
            .iter()
            .map(LlrWindow::max_stat)
            .fold(None::<WindowStat>, |best, s| match best {
                Some(b) if b.stat >= s.stat => Some(b),
                _ => Some(s),
            })
            .expect("grid is nonempty")
    }
}

/// `term(s, k, j)` supplies the LLR for candidate `s`.
pub fn wlglr_step(state: &mut GlrState, mut term: impl FnMut(usize, usize, usize) -> f64) -> (WindowStat, Decision) {
    if let Some((_, j)) = state.stopped_at {
        let stat = WindowStat {
            stat: f64::NAN,
            onset: 0,
            hypothesis: j,
        };
        return (stat, Decision::Stop { identified: state.hypotheses[j] });
    }
    for (s, w) in state.grid.iter_mut().enumerate() {
        w.push(|k, j| term(s, k, j));
    }
    let stat = state.stat();
    let d = threshold_decision(&stat, state.threshold, &state.hypotheses);
    if matches!(d, Decision::Stop { .. }) {
        state.stopped_at = Some((state.grid[0].time(), stat.hypothesis));
    }
    (stat, d)
}

/// `cov(y_i(t) − C_i·A·x̂_i(t−1))` from exact clean moments.
pub fn innovation_covariance(exact: &MomentHistory, model: &SystemModel, i: usize, t: usize) -> DMatrix<f64> {
    let prev = exact.at(t - 1);
    let s = model.sensor(i);
    let ca = s.c() * model.a();
    let err = &prev.b - &prev.h[i] - prev.h[i].transpose() + &prev.l[i];
    symmetrized(&ca * err * ca.transpose() + s.c() * model.q() * s.c().transpose() + s.r())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chi2State {
    pub window: usize,
    pub terms: VecDeque<f64>,
    pub threshold: f64,
    pub stopped_at: Option<usize>,
    pub t: usize,
}

impl Chi2State {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidParameter("chi-square window must be at least 1".into()));
        }
        Ok(Self {
            window,
            terms: VecDeque::with_capacity(window),
            threshold,
            stopped_at: None,
            t: 0,
        })
    }

    pub fn stat(&self) -> f64 {
        self.terms.iter().sum()
    }

    /// Adds a precomputed quadratic form `z'·cov(z)⁻¹·z`.
    pub fn push_quadratic(&mut self, quad: f64) -> (f64, bool) {
        self.t += 1;
        if self.terms.len() == self.window {
            self.terms.pop_front();
        }
        self.terms.push_back(quad);
        let stat = self.stat();
        let stop = self.stopped_at.is_none() && stat >= self.threshold;
        if stop {
            self.stopped_at = Some(self.t);
        }
        (stat, self.stopped_at.is_some())
    }
}

/// Sum of `z'·cov(z)⁻¹·z` over the last `J` innovations; stops at `η`.
pub fn chi2_step(state: &mut Chi2State, innovation: &DVector<f64>, cov: &DMatrix<f64>) -> Result<(f64, Decision)> {
    if cov.nrows() != innovation.len() {
        return Err(Error::Dimension("innovation covariance".into()));
    }
    let (chol, _) = jittered_cholesky(cov, "innovation covariance")?;
    let quad = innovation.dot(&chol.solve(innovation));
    let (stat, stopped) = state.push_quadratic(quad);
    Ok((stat, if stopped { Decision::Stop { identified: usize::MAX } } else { Decision::Continue }))
}

/// Whitening of every node's innovation at every round.
#[derive(Debug, Clone)]
pub struct InnovationTables {
    laws: Vec<Vec<CompiledLaw>>,
}

impl InnovationTables {
    pub fn new(exact: &MomentHistory, model: &SystemModel, horizon: usize) -> Result<Self> {
        let q = model.obs_dim();
        let laws = (1..=horizon)
            .map(|t| {
                (0..model.num_nodes())
                    .map(|i| CompiledLaw::new(&DMatrix::zeros(q, 0), &innovation_covariance(exact, model, i, t)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { laws })
    }

    /// `z'·cov(z)⁻¹·z` for node `i` at round `t`.
    pub fn quadratic(&self, t: usize, i: usize, innovation: &[f64]) -> f64 {
        self.laws[t - 1][i].mahalanobis_sq(innovation, &[])
    }
}

/// `y_i(t) − C_i·A·x̂_i(t−1)`.
pub fn innovation(model: &SystemModel, y: &DVector<f64>, xhat_prev: &DVector<f64>, i: usize) -> DVector<f64> {
    y - model.sensor(i).c() * (model.a() * xhat_prev)
}
