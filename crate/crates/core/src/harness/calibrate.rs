//! Online threshold calibration by stochastic approximation,
//! `b(j) = b(j−1) + a(j)·signal(j)` with `a(j) = a0 / j`.

use serde::{Deserialize, Serialize};

use super::metrics::is_false_alarm;
use super::StatTrace;
use crate::bayes::logit;

/// Largest posterior threshold the calibration may reach.
pub const MAX_PROBABILITY_THRESHOLD: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSequence {
    pub a0: f64,
}

impl StepSequence {
    /// Step for trial `j ≥ 1`.
    pub fn step(&self, j: usize) -> f64 {
        self.a0 / j as f64
    }
}

/// Units of the calibrated threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdScale {
    /// A posterior probability `Λ`, compared with the trace as `logit(Λ)`.
    Probability,
    /// A nonnegative threshold on the statistic itself.
    Statistic,
    /// An unconstrained threshold on a log-likelihood-ratio statistic.
    LogRatio,
}

impl ThresholdScale {
    pub fn clamp(self, b: f64) -> f64 {
        match self {
            ThresholdScale::Probability => b.clamp(0.0, MAX_PROBABILITY_THRESHOLD),
            ThresholdScale::Statistic => b.max(0.0),
            ThresholdScale::LogRatio => b,
        }
    }

    /// Threshold in the units of the recorded statistic.
    pub fn to_stat(self, b: f64) -> f64 {
        match self {
            ThresholdScale::Probability => logit(b),
            ThresholdScale::Statistic | ThresholdScale::LogRatio => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationTarget {
    /// Signal `1_FA − α`.
    Pfa(f64),
    /// Signal `1 − min(T, horizon) / arl`.
    RunLength(f64),
}

impl CalibrationTarget {
    pub fn value(self) -> f64 {
        match self {
            CalibrationTarget::Pfa(a) | CalibrationTarget::RunLength(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTrace {
    /// `b(0..=N)`.
    pub thresholds: Vec<f64>,
    /// Per trial: the false-alarm indicator or the censored run length
    /// observed under the threshold in force.
    pub observations: Vec<f64>,
}

impl CalibrationTrace {
    pub fn final_threshold(&self) -> f64 {
        *self.thresholds.last().expect("initial threshold always present")
    }

    /// Mean observation over the trailing `fraction` of trials.
    pub fn tail_mean(&self, fraction: f64) -> f64 {
        let n = self.observations.len();
        let k = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
        self.observations[n - k..].iter().sum::<f64>() / k as f64
    }

    pub fn mean(&self) -> f64 {
        self.observations.iter().sum::<f64>() / self.observations.len().max(1) as f64
    }
}

/// Streams the trials in order; `observe(j, stat_threshold)` returns the
/// false-alarm indicator (PFA targets) or `min(T, horizon)` (run-length
/// targets) of trial `j` under the current threshold.
pub fn calibrate_threshold(
    trials: usize,
    initial: f64,
    target: CalibrationTarget,
    steps: StepSequence,
    scale: ThresholdScale,
    mut observe: impl FnMut(usize, f64) -> f64,
) -> CalibrationTrace {
    let mut b = scale.clamp(initial);
    let mut thresholds = Vec::with_capacity(trials + 1);
    let mut observations = Vec::with_capacity(trials);
    thresholds.push(b);
    for j in 1..=trials {
        let obs = observe(j - 1, scale.to_stat(b));
        let signal = match target {
            CalibrationTarget::Pfa(alpha) => obs - alpha,
            CalibrationTarget::RunLength(arl) => 1.0 - obs / arl,
        };
        b = scale.clamp(b + steps.step(j) * signal);
        thresholds.push(b);
        observations.push(obs);
    }
    CalibrationTrace {
        thresholds,
        observations,
    }
}

/// Calibration driven by cached statistic traces with known onsets.
pub fn calibrate_on_traces(
    traces: &[(&StatTrace, Option<usize>)],
    horizon: usize,
    initial: f64,
    target: CalibrationTarget,
    steps: StepSequence,
    scale: ThresholdScale,
) -> CalibrationTrace {
    calibrate_threshold(traces.len(), initial, target, steps, scale, |j, b| {
        let (trace, onset) = traces[j];
        let stop = trace.first_crossing(b).map(|h| h.0);
        match target {
            CalibrationTarget::Pfa(_) => f64::from(u8::from(is_false_alarm(stop, onset))),
            CalibrationTarget::RunLength(_) => stop.unwrap_or(horizon).min(horizon) as f64,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_traces(n: usize, seed: u64) -> Vec<StatTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| StatTrace {
                stat: vec![rng.random::<f64>(), f64::NEG_INFINITY],
                ident: vec![0, 0],
            })
            .collect()
    }

    #[test]
    fn zero_alpha_never_lowers_threshold() {
        let traces = uniform_traces(200, 1);
        let refs: Vec<_> = traces.iter().map(|t| (t, Some(2))).collect();
        let tr = calibrate_on_traces(&refs, 2, 0.3, CalibrationTarget::Pfa(0.0), StepSequence { a0: 1.0 }, ThresholdScale::Statistic);
        assert!(tr.thresholds.windows(2).all(|w| w[1] >= w[0]));
        let tr = calibrate_on_traces(&refs, 2, 0.3, CalibrationTarget::Pfa(1.0), StepSequence { a0: 1.0 }, ThresholdScale::Statistic);
        assert!(tr.thresholds.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn converges_to_quantile() {
        // P(FA | b) = 1 − b for uniform statistics, so b* = 1 − α.
        let traces = uniform_traces(20_000, 2);
        let refs: Vec<_> = traces.iter().map(|t| (t, Some(2))).collect();
        let tr = calibrate_on_traces(&refs, 2, 0.5, CalibrationTarget::Pfa(0.1), StepSequence { a0: 1.0 }, ThresholdScale::Statistic);
        assert!((tr.final_threshold() - 0.9).abs() < 0.02, "{}", tr.final_threshold());
        assert!((tr.tail_mean(0.2) - 0.1).abs() < 0.02);
    }

    #[test]
    fn run_length_target() {
        // Stop at round k with the statistic equal to k: T = ⌈b⌉.
        let trace = StatTrace {
            stat: (1..=50).map(f64::from).collect(),
            ident: vec![0; 50],
        };
        let refs = vec![(&trace, None); 3000];
        let tr = calibrate_on_traces(&refs, 50, 5.0, CalibrationTarget::RunLength(20.0), StepSequence { a0: 20.0 }, ThresholdScale::Statistic);
        assert!((tr.final_threshold() - 20.0).abs() < 1.0, "{}", tr.final_threshold());
    }

    #[test]
    fn probability_scale_is_clamped() {
        let tr = calibrate_threshold(10, 0.9, CalibrationTarget::Pfa(0.0), StepSequence { a0: 5.0 }, ThresholdScale::Probability, |_, _| 1.0);
        assert!(tr.thresholds.iter().all(|&b| b <= MAX_PROBABILITY_THRESHOLD));
        assert_eq!(ThresholdScale::Probability.to_stat(0.5), 0.0);
    }
}
