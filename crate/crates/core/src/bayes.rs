//! Bayesian quickest detection with a geometric onset prior.
//!
//! For every hypothesised attacked sensor `l` node `i` tracks the posterior
//! odds `λ_l(t) = P(τ ≤ t, l | data) / P(τ > t | data)` through
//!
//! ```text
//! λ_l(t) = (λ_l(t−1) + ρ) / (1 − ρ) · f_post,l(t) / f_pre(t)
//! ```
//!
//! where the post-change density of each factor is a mixture over recent
//! onsets. Everything is kept in the log domain.

use crate::error::{Error, Result};
use crate::gaussian::{log_add_exp, log_sum_exp};
use crate::tables::{LawTables, NodeData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop { identified: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesDetectorState {
    /// Hypothesised sensors, aligned with `log_lambda`.
    pub hypotheses: Vec<usize>,
    pub log_lambda: Vec<f64>,
    pub pi: f64,
    pub threshold: f64,
    pub rho: f64,
    pub t: usize,
    pub stopped_at: Option<usize>,
    pub identified: Option<usize>,
}

impl BayesDetectorState {
    /// `λ_l(0) = 0` for every hypothesis.
    pub fn new(hypotheses: Vec<usize>, rho: f64, threshold: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        if hypotheses.is_empty() {
            return Err(Error::InvalidParameter("no hypotheses".into()));
        }
        let k = hypotheses.len();
        Ok(Self {
            hypotheses,
            log_lambda: vec![f64::NEG_INFINITY; k],
            pi: 0.0,
            threshold,
            rho,
            t: 0,
            stopped_at: None,
            identified: None,
        })
    }

    pub fn max_log_lambda(&self) -> (f64, usize) {
        argmax(&self.log_lambda)
    }
}

/// First maximiser; ties go to the lowest index.
fn argmax(values: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &v) in values.iter().enumerate() {
        if v > best.0 {
            best = (v, k);
        }
    }
    best
}

/// One step of the recursion. `log_ratio[k]` is
/// `log f_post,l(t) − log f_pre(t)` for hypothesis `k`. A frozen
/// (stopped) state is returned unchanged.
pub fn update_lambda(state: &BayesDetectorState, log_ratio: &[f64]) -> Result<BayesDetectorState> {
    if log_ratio.len() != state.hypotheses.len() {
        return Err(Error::Dimension(format!(
            "{} ratios for {} hypotheses",
            log_ratio.len(),
            state.hypotheses.len()
        )));
    }
    if state.stopped_at.is_some() {
        return Ok(state.clone());
    }
    let log_rho = state.rho.ln();
    let log_1m = (1.0 - state.rho).ln();
    let mut next = state.clone();
    for (ll, &r) in next.log_lambda.iter_mut().zip(log_ratio) {
        let r = if r.is_nan() { 0.0 } else { r };
        *ll = log_add_exp(*ll, log_rho) - log_1m + r;
    }
    next.t += 1;
    next.pi = lambda_to_pi(&next.log_lambda).0;
    Ok(next)
}

/// `π = max_l λ_l / (1 + λ_l)` from log-odds, with the maximising index.
pub fn lambda_to_pi(log_lambda: &[f64]) -> (f64, usize) {
    let (best, k) = argmax(log_lambda);
    (logistic(best), k)
}

pub fn logistic(log_odds: f64) -> f64 {
    if log_odds == f64::NEG_INFINITY {
        0.0
    } else {
        1.0 / (1.0 + (-log_odds).exp())
    }
}

/// `log(Λ / (1 − Λ))`; `+∞` for `Λ ≥ 1`.
pub fn logit(p: f64) -> f64 {
    if p >= 1.0 {
        f64::INFINITY
    } else if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        (p / (1.0 - p)).ln()
    }
}

/// Stops once `π ≥ Λ`. The comparison is made on log-odds so that a
/// threshold of 1 is never reached.
pub fn decide(state: &BayesDetectorState) -> Decision {
    let (best, k) = state.max_log_lambda();
    if state.t > 0 && best >= logit(state.threshold) {
        Decision::Stop {
            identified: state.hypotheses[k],
        }
    } else {
        Decision::Continue
    }
}

/// Applies [`decide`] and freezes the state on a stop.
pub fn step(state: &mut BayesDetectorState, log_ratio: &[f64]) -> Result<Decision> {
    if state.stopped_at.is_some() {
        return Ok(Decision::Stop {
            identified: state.identified.expect("stopped states carry a decision"),
        });
    }
    *state = update_lambda(state, log_ratio)?;
    let d = decide(state);
    if let Decision::Stop { identified } = d {
        state.stopped_at = Some(state.t);
        state.identified = Some(identified);
    }
    Ok(d)
}

/// `log P(τ = m | τ ≤ t)` for the retained onsets
/// `m = max(1, t−W+1) ..= t`; the oldest retained onset also carries the
/// prior mass of all earlier onsets.
pub fn onset_log_weights(rho: f64, t: usize, window: usize) -> Vec<(usize, f64)> {
    let first = t.saturating_sub(window.max(1) - 1).max(1);
    let log_1m = (1.0 - rho).ln();
    // log(1 − (1−ρ)^k)
    let log_cdf = |k: usize| (-(k as f64 * log_1m).exp_m1()).ln();
    let norm = log_cdf(t);
    (first..=t)
        .map(|m| {
            let w = if m == first {
                log_cdf(m)
            } else {
                rho.ln() + (m - 1) as f64 * log_1m
            };
            (m, w - norm)
        })
        .collect()
}

/// Computes the per-hypothesis log density ratios of one node at one round
/// from precompiled laws.
#[derive(Debug, Clone)]
pub struct BayesEvaluator {
    pub rho: f64,
    pub window: usize,
    /// Index of the injected covariance in the law tables.
    pub sigma_index: usize,
    weights: Vec<Vec<(usize, f64)>>,
    scratch_pre: Vec<f64>,
    scratch_post: Vec<f64>,
    scratch_mix: Vec<Vec<f64>>,
    pub floor_hits: u64,
}

impl BayesEvaluator {
    pub fn new(rho: f64, window: usize, sigma_index: usize, horizon: usize) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        if window == 0 {
            return Err(Error::InvalidParameter("onset window must be at least 1".into()));
        }
        let weights = (0..=horizon)
            .map(|t| if t == 0 { Vec::new() } else { onset_log_weights(rho, t, window) })
            .collect();
        Ok(Self {
            rho,
            window,
            sigma_index,
            weights,
            scratch_pre: Vec::new(),
            scratch_post: Vec::new(),
            scratch_mix: Vec::new(),
            floor_hits: 0,
        })
    }

    /// Fills `out[k]` with the log ratio for `hypotheses[k]`.
    pub fn log_ratios(
        &mut self,
        tables: &LawTables,
        data: &NodeData,
        i: usize,
        t: usize,
        hypotheses: &[usize],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        self.floor_hits += u64::from(tables.clean(t, i).factor_log_pdfs(data, &mut self.scratch_pre));
        let nf = self.scratch_pre.len();
        let log_pre: f64 = self.scratch_pre.iter().sum();
        let weights = &self.weights[t];
        for &l in hypotheses {
            // per factor, log Σ_m w_m f_m
            self.scratch_mix.resize_with(nf, Vec::new);
            for col in &mut self.scratch_mix {
                col.clear();
            }
            for &(m, lw) in weights {
                let laws = tables.attacked(self.sigma_index, l, m, t, i);
                self.floor_hits += u64::from(laws.factor_log_pdfs(data, &mut self.scratch_post));
                for (col, v) in self.scratch_mix.iter_mut().zip(&self.scratch_post) {
                    col.push(lw + v);
                }
            }
            let log_post: f64 = self.scratch_mix.iter().map(|col| log_sum_exp(col.iter().copied())).sum();
            out.push(log_post - log_pre);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uninformative_data_follows_prior_recursion() {
        let s = BayesDetectorState::new(vec![0], 0.5, 0.9).unwrap();
        let s1 = update_lambda(&s, &[0.0]).unwrap();
        assert!((s1.log_lambda[0].exp() - 1.0).abs() < 1e-15);
        assert!((s1.pi - 0.5).abs() < 1e-15);
        let s2 = update_lambda(&s1, &[0.0]).unwrap();
        assert!((s2.log_lambda[0].exp() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pi_from_lambda() {
        assert_eq!(lambda_to_pi(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), (0.0, 0));
        let (pi, k) = lambda_to_pi(&[0.0, 3f64.ln()]);
        assert!((pi - 0.75).abs() < 1e-15);
        assert_eq!(k, 1);
        assert_eq!(lambda_to_pi(&[1.0, 1.0]).1, 0);
    }

    #[test]
    fn decisions() {
        let mut s = BayesDetectorState::new(vec![3, 4], 0.1, 0.8).unwrap();
        s.t = 1;
        s.log_lambda = vec![logit(0.9), 0.0];
        assert_eq!(decide(&s), Decision::Stop { identified: 3 });
        s.threshold = 1.0;
        s.log_lambda = vec![800.0, 0.0];
        assert_eq!(decide(&s), Decision::Continue);
    }

    #[test]
    fn stopped_state_is_frozen() {
        let mut s = BayesDetectorState::new(vec![0], 0.5, 0.4).unwrap();
        assert_eq!(step(&mut s, &[0.0]).unwrap(), Decision::Stop { identified: 0 });
        let frozen = s.clone();
        step(&mut s, &[5.0]).unwrap();
        assert_eq!(s, frozen);
    }

    #[test]
    fn onset_weights_sum_to_one() {
        for t in [1, 5, 19, 20, 21, 80] {
            let w = onset_log_weights(0.05, t, 20);
            let total: f64 = w.iter().map(|(_, v)| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "t={t}");
            assert_eq!(w.last().unwrap().0, t);
            assert_eq!(w.len(), t.min(20));
        }
    }

    #[test]
    fn rho_out_of_range_rejected() {
        assert!(BayesDetectorState::new(vec![0], 0.0, 0.5).is_err());
        assert!(BayesDetectorState::new(vec![0], 1.0, 0.5).is_err());
    }
}
