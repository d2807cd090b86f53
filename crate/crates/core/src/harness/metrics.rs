//! Trial outcomes and aggregated delay, false-alarm and isolation metrics.

use crate::error::{Error, Result};

use super::{Detector, StatTrace, Thresholds, TrialTraces};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub detector: Detector,
    pub node: usize,
    pub stop: Option<usize>,
    pub identified: Option<usize>,
    /// `stop < τ`; a stop with no onset inside the horizon is a false alarm.
    pub false_alarm: bool,
}

impl Outcome {
    pub fn from_trace(detector: Detector, node: usize, trace: &StatTrace, threshold: f64, onset: Option<usize>) -> Self {
        let hit = trace.first_crossing(threshold);
        let stop = hit.map(|h| h.0);
        Self {
            detector,
            node,
            stop,
            identified: hit.and_then(|h| h.1),
            false_alarm: is_false_alarm(stop, onset),
        }
    }
}

pub fn is_false_alarm(stop: Option<usize>, onset: Option<usize>) -> bool {
    match (stop, onset) {
        (Some(t), Some(tau)) => t < tau,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub index: usize,
    pub horizon: usize,
    pub onset: Option<usize>,
    pub attacked: Option<usize>,
    pub outcomes: Vec<Outcome>,
}

impl TrialRecord {
    pub fn from_traces(traces: &TrialTraces, thresholds: &Thresholds) -> Self {
        let mut outcomes = Vec::new();
        for (d, per_node) in &thresholds.entries {
            for (i, (trace, &b)) in traces.get(*d).iter().zip(per_node).enumerate() {
                outcomes.push(Outcome::from_trace(*d, i, trace, b, traces.onset));
            }
        }
        Self {
            index: traces.index,
            horizon: traces.horizon,
            onset: traces.onset,
            attacked: traces.attacked,
            outcomes,
        }
    }

    pub fn outcome(&self, d: Detector, node: usize) -> Option<&Outcome> {
        self.outcomes.iter().find(|o| o.detector == d && o.node == node)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub detector: Detector,
    pub node: usize,
    pub trials: usize,
    pub false_alarms: usize,
    pub pfa: f64,
    /// Stops at or after the onset.
    pub detections: usize,
    /// Trials whose onset fell inside the horizon.
    pub attacked_trials: usize,
    /// `E[T − τ | τ ≤ T ≤ horizon]`; `None` without any detection.
    pub mean_delay: Option<f64>,
    /// Share of detections naming a sensor other than the attacked one;
    /// `None` for detectors that do not isolate.
    pub misidentification: Option<f64>,
}

impl MetricSummary {
    pub fn detection_rate(&self) -> f64 {
        if self.attacked_trials == 0 {
            0.0
        } else {
            self.detections as f64 / self.attacked_trials as f64
        }
    }
}

pub fn aggregate_metrics(records: &[TrialRecord], detector: Detector, node: usize) -> Result<MetricSummary> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no trial records".into()));
    }
    let mut s = MetricSummary {
        detector,
        node,
        trials: 0,
        false_alarms: 0,
        pfa: 0.0,
        detections: 0,
        attacked_trials: 0,
        mean_delay: None,
        misidentification: None,
    };
    let mut delay_sum = 0.0;
    let (mut named, mut wrong) = (0usize, 0usize);
    for r in records {
        let o = r
            .outcome(detector, node)
            .ok_or_else(|| Error::InvalidParameter(format!("record {} lacks {} at node {node}", r.index, detector.name())))?;
        s.trials += 1;
        s.false_alarms += usize::from(o.false_alarm);
        if o.false_alarm {
            continue;
        }
        let Some(tau) = r.onset.filter(|&tau| tau <= r.horizon) else { continue };
        s.attacked_trials += 1;
        if let Some(t) = o.stop {
            s.detections += 1;
            delay_sum += (t - tau) as f64;
            if let Some(id) = o.identified {
                named += 1;
                wrong += usize::from(Some(id) != r.attacked);
            }
        }
    }
    s.pfa = s.false_alarms as f64 / s.trials as f64;
    if s.detections > 0 {
        s.mean_delay = Some(delay_sum / s.detections as f64);
    }
    if named > 0 {
        s.misidentification = Some(wrong as f64 / named as f64);
    }
    Ok(s)
}

/// `1 / mean(min(T, horizon))` on no-attack traces, with the fraction of
/// runs that reached the horizon without stopping.
pub fn run_length_far<'a>(traces: impl IntoIterator<Item = &'a StatTrace>, threshold: f64, horizon: usize) -> (f64, f64) {
    let (mut total, mut n, mut censored) = (0usize, 0usize, 0usize);
    for tr in traces {
        n += 1;
        match tr.first_crossing(threshold) {
            Some((t, _)) => total += t.min(horizon),
            None => {
                total += horizon;
                censored += 1;
            }
        }
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (n as f64 / total as f64, censored as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, onset: Option<usize>, stop: Option<usize>, id: Option<usize>) -> TrialRecord {
        TrialRecord {
            index,
            horizon: 20,
            onset,
            attacked: onset.map(|_| 1),
            outcomes: vec![Outcome {
                detector: Detector::Bayes,
                node: 0,
                stop,
                identified: id,
                false_alarm: is_false_alarm(stop, onset),
            }],
        }
    }

    #[test]
    fn all_false_alarms() {
        let r = vec![rec(0, Some(10), Some(3), Some(1)), rec(1, Some(5), Some(4), Some(0))];
        let m = aggregate_metrics(&r, Detector::Bayes, 0).unwrap();
        assert_eq!(m.pfa, 1.0);
        assert_eq!(m.mean_delay, None);
    }

    #[test]
    fn single_delay() {
        let m = aggregate_metrics(&[rec(0, Some(7), Some(11), Some(1))], Detector::Bayes, 0).unwrap();
        assert_eq!(m.mean_delay, Some(4.0));
        assert_eq!(m.pfa, 0.0);
        assert_eq!(m.misidentification, Some(0.0));
    }

    #[test]
    fn misidentification_and_missed() {
        let r = vec![
            rec(0, Some(2), Some(2), Some(1)),
            rec(1, Some(2), Some(6), Some(3)),
            rec(2, Some(2), None, None),
        ];
        let m = aggregate_metrics(&r, Detector::Bayes, 0).unwrap();
        assert_eq!(m.mean_delay, Some(2.0));
        assert_eq!(m.misidentification, Some(0.5));
        assert!((m.detection_rate() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(aggregate_metrics(&[], Detector::Bayes, 0).is_err());
    }

    #[test]
    fn far_with_censoring() {
        let a = StatTrace {
            stat: vec![0.0, 0.0, 9.0, 0.0],
            ident: vec![0; 4],
        };
        let b = StatTrace {
            stat: vec![0.0; 4],
            ident: vec![0; 4],
        };
        let (far, cens) = run_length_far([&a, &b], 1.0, 4);
        assert!((far - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(cens, 0.5);
    }
}
