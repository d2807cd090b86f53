//! Sampling checks of the simulator and of the moment recursion on the
//! five-sensor network.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fdi_qcd::gaussian::gaussian_log_pdf;
use fdi_qcd::harness::ExperimentConfig;
use fdi_qcd::model::{AttackModel, Onset, SensorModel, SystemModel, Topology};
use fdi_qcd::moments::{AttackContext, MomentHistory, MomentMode};
use fdi_qcd::sim::{observe, observe_attacked, sample_attack_onset, step_process};

const DRAWS: usize = 100_000;

fn sample_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n;
    samples.iter().fold(DMatrix::zeros(d, d), |acc, s| {
        let c = s - &mean;
        acc + &c * c.transpose()
    }) / (n - 1.0)
}

/// Largest entrywise deviation relative to the largest reference entry.
fn entry_err(est: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (est - reference).amax() / reference.amax()
}

fn five_sensor() -> (ExperimentConfig, SystemModel) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/five_sensor.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let model = cfg.system_model().unwrap();
    (cfg, model)
}

fn white_noise_model() -> SystemModel {
    let sensor = SensorModel::new(
        DMatrix::identity(2, 2),
        DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
    )
    .unwrap();
    SystemModel::new(
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        vec![sensor],
        Topology::complete(1),
    )
    .unwrap()
}

#[test]
fn process_noise_has_covariance_q() {
    let model = white_noise_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = DVector::from_vec(vec![3.0, -1.0]);
    let draws: Vec<_> = (0..DRAWS).map(|_| step_process(&model, &x0, &mut rng).unwrap()).collect();
    assert!(entry_err(&sample_cov(&draws), model.q()) < 0.02);
}

#[test]
fn measurement_noise_has_covariance_r() {
    let model = white_noise_model();
    let sensor = model.sensor(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DVector::zeros(2);
    let draws: Vec<_> = (0..DRAWS).map(|_| observe(sensor, &x, &mut rng).unwrap()).collect();
    assert!(entry_err(&sample_cov(&draws), sensor.r()) < 0.02);
}

#[test]
fn attacked_residual_has_covariance_r_plus_sigma() {
    let model = white_noise_model();
    let sensor = model.sensor(0);
    let sigma = DMatrix::identity(2, 2) * 3.0;
    let attack = AttackModel::new(0, Onset::At(4), sigma.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DVector::from_vec(vec![0.5, 2.0]);
    let draws: Vec<_> = (0..DRAWS)
        .map(|_| observe_attacked(sensor, 0, &attack, &x, 5, &mut rng).unwrap() - sensor.c() * &x)
        .collect();
    assert!(entry_err(&sample_cov(&draws), &(sensor.r() + sigma)) < 0.02);
}

#[test]
fn onset_mean_is_one_over_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mean = (0..DRAWS).map(|_| sample_attack_onset(0.05, &mut rng).unwrap() as f64).sum::<f64>() / DRAWS as f64;
    assert!((mean - 20.0).abs() / 20.0 < 0.02, "mean onset {mean}");
}

#[test]
fn onset_cdf_matches_geometric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hits = (0..DRAWS).filter(|_| sample_attack_onset(0.5, &mut rng).unwrap() <= 2).count();
    assert!((hits as f64 / DRAWS as f64 - 0.75).abs() < 0.01);
}

#[test]
fn state_covariance_matches_recursion_at_t10() {
    let (cfg, model) = five_sensor();
    let sched = fdi_qcd::kcif::FilterSchedule::new(&model, cfg.filter.gain, 10).unwrap();
    let hist = MomentHistory::new(&model, &sched, &AttackContext::none(2), 10, MomentMode::Exact).unwrap();
    let init = fdi_qcd::sim::GaussianNoise::new(model.p0());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws: Vec<_> = (0..DRAWS)
        .map(|_| {
            let mut x = init.sample(&mut rng);
            for _ in 0..10 {
                x = step_process(&model, &x, &mut rng).unwrap();
            }
            x
        })
        .collect();
    let b = &hist.at(10).b;
    let err = (sample_cov(&draws) - b).norm() / b.norm();
    assert!(err < 0.03, "relative error {err}");
}

#[test]
fn attacked_observation_log_ratio_is_positive_on_attacked_data() {
    let (_, model) = five_sensor();
    let sensor = model.sensor(1);
    let sigma = DMatrix::identity(2, 2) * 3.0;
    let attack = AttackModel::new(1, Onset::At(1), sigma.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = DVector::zeros(2);
    let zero = DVector::zeros(2);
    let attacked_cov = sensor.r() + &sigma;
    let mean = (0..10_000)
        .map(|_| {
            let y = observe_attacked(sensor, 1, &attack, &x, 1, &mut rng).unwrap();
            gaussian_log_pdf(&y, &zero, &attacked_cov).unwrap() - gaussian_log_pdf(&y, &zero, sensor.r()).unwrap()
        })
        .sum::<f64>()
        / 10_000.0;
    assert!(mean > 0.0, "mean log ratio {mean}");
}
