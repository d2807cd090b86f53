use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fdi_qcd::bayes::{logistic, logit, onset_log_weights};
use fdi_qcd::gaussian::{log_sum_exp, ConditionalLaw};
use fdi_qcd::harness::calibrate::{
    calibrate_threshold, CalibrationTarget, StepSequence, ThresholdScale, MAX_PROBABILITY_THRESHOLD,
};
use fdi_qcd::kcif::{FilterSchedule, GainMode};
use fdi_qcd::linalg::{frobenius_rel_err, is_psd, psd_leq};
use fdi_qcd::model::{SystemModel, Topology};
use fdi_qcd::moments::{AttackContext, MomentHistory, MomentMode};
use fdi_qcd::nonbayes::LlrWindow;

fn joint(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim * dim).prop_map(move |v| {
        let m = DMatrix::from_vec(dim, dim, v);
        &m * m.transpose() + DMatrix::identity(dim, dim) * 0.1
    })
}

fn law_case() -> impl Strategy<Value = (usize, DMatrix<f64>)> {
    (1usize..4, 0usize..5).prop_flat_map(|(d, k)| (Just(d), joint(d + k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_law_reproduces_joint((d, s) in law_case()) {
        let k = s.nrows() - d;
        let xx = s.view((0, 0), (d, d)).into_owned();
        let xr = s.view((0, d), (d, k)).into_owned();
        let rr = s.view((d, d), (k, k)).into_owned();
        let law = ConditionalLaw::new(&xx, &xr, &rr).unwrap();
        prop_assert!(law.jitter.is_none());
        if k > 0 {
            prop_assert!(frobenius_rel_err(&(&law.gain * &rr), &xr) < 1e-9);
        }
        let schur = &xx - &law.gain * xr.transpose();
        prop_assert!(frobenius_rel_err(&law.cov, &schur) < 1e-9);
        prop_assert!(is_psd(&law.cov, 1e-10));
        prop_assert!(psd_leq(&law.cov, &xx, 1e-10));
    }

    #[test]
    fn onset_weights_are_a_distribution(rho in 0.001f64..0.99, t in 1usize..300, window in 1usize..50) {
        let w = onset_log_weights(rho, t, window);
        prop_assert_eq!(w.len(), t.min(window));
        prop_assert!(w.iter().all(|&(m, lw)| (1..=t).contains(&m) && lw <= 1e-12));
        prop_assert!(log_sum_exp(w.iter().map(|&(_, lw)| lw)).abs() < 1e-9);
    }

    #[test]
    fn logit_inverts_logistic(p in 1e-9f64..(1.0 - 1e-9)) {
        prop_assert!((logistic(logit(p)) - p).abs() < 1e-12);
    }

    #[test]
    fn window_statistics_match_brute_force(
        window in 0usize..8,
        terms in prop::collection::vec(prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 20), 20),
    ) {
        // terms[n-1][k-1][j] is the term of round n for onset k and hypothesis j
        let mut w = LlrWindow::new(window, 3).unwrap();
        for n in 1..=20 {
            w.push(|k, j| terms[n - 1][k - 1][j]);
            let lo = n.saturating_sub(window).max(1);
            let sums: Vec<Vec<f64>> = (lo..=n)
                .map(|k| (0..3).map(|j| (k..=n).map(|t| terms[t - 1][k - 1][j]).sum()).collect())
                .collect();
            let msprt = sums.iter().map(|s| s.iter().copied().fold(f64::INFINITY, f64::min)).fold(f64::NEG_INFINITY, f64::max);
            let glr = sums.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((w.msprt_stat().stat - msprt).abs() < 1e-10);
            prop_assert!((w.max_stat().stat - glr).abs() < 1e-10);
        }
    }

    #[test]
    fn probability_thresholds_stay_in_range(
        initial in 0.0f64..1.0,
        alpha in 0.01f64..0.5,
        a0 in 0.1f64..50.0,
        alarms in prop::collection::vec(any::<bool>(), 1..200),
    ) {
        let trace = calibrate_threshold(
            alarms.len(),
            initial,
            CalibrationTarget::Pfa(alpha),
            StepSequence { a0 },
            ThresholdScale::Probability,
            |j, _| if alarms[j] { 1.0 } else { 0.0 },
        );
        prop_assert!(trace.thresholds.iter().all(|&b| (0.0..=MAX_PROBABILITY_THRESHOLD).contains(&b)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_and_local_moments_stay_psd(seed in any::<u64>(), topo in 0usize..3) {
        let topology = match topo {
            0 => Topology::line(3),
            1 => Topology::five_node(),
            _ => Topology::complete(3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SystemModel::random(&mut rng, 2, 2, topology, 0.95).unwrap();
        let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), 8).unwrap();
        let exact = MomentHistory::new(&model, &sched, &AttackContext::none(2), 8, MomentMode::Exact).unwrap();
        let local = MomentHistory::new(&model, &sched, &AttackContext::none(2), 8, MomentMode::Local).unwrap();
        for t in 0..=8 {
            let g = exact.at(t).global.as_ref().unwrap();
            prop_assert!(is_psd(g, 1e-9));
            for v in &local.at(t).views {
                prop_assert!(is_psd(&v.joint, 1e-9));
            }
            prop_assert!(frobenius_rel_err(&local.at(t).b, &exact.at(t).b) < 1e-12);
        }
    }
}
