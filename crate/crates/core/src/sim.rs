//! Ground-truth process, sensor observations and attack injection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::model::{AttackModel, Onset, SensorModel, SystemModel};

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Zero-mean Gaussian sampler with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    factor: DMatrix<f64>,
}

impl GaussianNoise {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        Self { factor: psd_factor(cov) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.factor * standard_normal(rng, self.factor.ncols())
    }
}

/// Caches the noise square roots of a model so that trajectories can be
/// generated without refactorising covariances at every step.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a SystemModel,
    process: GaussianNoise,
    initial: GaussianNoise,
    measurement: Vec<GaussianNoise>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a SystemModel) -> Self {
        Self {
            model,
            process: GaussianNoise::new(model.q()),
            initial: GaussianNoise::new(model.p0()),
            measurement: model.sensors().iter().map(|s| GaussianNoise::new(s.r())).collect(),
        }
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    /// `A·x + w`, `w ~ N(0, Q)`.
    pub fn step_process<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if x.len() != self.model.state_dim() {
            return Err(Error::Dimension(format!("state has length {}", x.len())));
        }
        check_finite(x, "state")?;
        Ok(self.model.a() * x + self.process.sample(rng))
    }

    /// `C_i·x + v_i`, `v_i ~ N(0, R_i)`.
    pub fn observe<R: Rng + ?Sized>(&self, sensor: usize, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let s = self.model.sensor(sensor);
        if x.len() != s.state_dim() {
            return Err(Error::Dimension(format!("state has length {}", x.len())));
        }
        Ok(s.c() * x + self.measurement[sensor].sample(rng))
    }

    /// Like [`Self::observe`], plus `e ~ N(0, Σ)` when `sensor` is the
    /// attack target and `t ≥ τ`.
    pub fn observe_attacked<R: Rng + ?Sized>(
        &self,
        sensor: usize,
        attack: &AttackModel,
        injection: &GaussianNoise,
        x: &DVector<f64>,
        t: usize,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if t == 0 {
            return Err(Error::InvalidParameter("observation time must be at least 1".into()));
        }
        let y = self.observe(sensor, x, rng)?;
        if attack.active(sensor, t) {
            Ok(y + injection.sample(rng))
        } else {
            Ok(y)
        }
    }

    /// Full path `x(0..=T)` with `x(0) ~ N(0, P0)` and observations
    /// `y_i(1..=T)` for every sensor, attacked per `attack`.
    pub fn generate_trajectory<R: Rng + ?Sized>(
        &self,
        attack: &AttackModel,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        attack.validate_for(self.model)?;
        let injection = GaussianNoise::new(attack.sigma());
        let n = self.model.num_nodes();
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(self.initial.sample(rng));
        let mut observations = Vec::with_capacity(horizon);
        for t in 1..=horizon {
            let x = self.step_process(&states[t - 1], rng)?;
            let ys = (0..n)
                .map(|i| self.observe_attacked(i, attack, &injection, &x, t, rng))
                .collect::<Result<Vec<_>>>()?;
            states.push(x);
            observations.push(ys);
        }
        Ok(Trajectory {
            states,
            observations,
            onset: attack.onset(),
            attacked: attack.onset().time().map(|_| attack.target()),
        })
    }
}

pub fn step_process<R: Rng + ?Sized>(model: &SystemModel, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Simulator::new(model).step_process(x, rng)
}

pub fn observe<R: Rng + ?Sized>(sensor: &SensorModel, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    if x.len() != sensor.state_dim() {
        return Err(Error::Dimension(format!("state has length {}", x.len())));
    }
    Ok(sensor.c() * x + GaussianNoise::new(sensor.r()).sample(rng))
}

/// Observation of `sensor` (with index `index` in the network) at time `t`.
pub fn observe_attacked<R: Rng + ?Sized>(
    sensor: &SensorModel,
    index: usize,
    attack: &AttackModel,
    x: &DVector<f64>,
    t: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if t == 0 {
        return Err(Error::InvalidParameter("observation time must be at least 1".into()));
    }
    let y = observe(sensor, x, rng)?;
    if attack.active(index, t) {
        Ok(y + GaussianNoise::new(attack.sigma()).sample(rng))
    } else {
        Ok(y)
    }
}

/// `τ ≥ 1` with `P(τ = k) = ρ(1−ρ)^(k−1)`.
pub fn sample_attack_onset<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("rho must lie in (0, 1], got {rho}")));
    }
    let geo = Geometric::new(rho).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(geo.sample(rng) as usize + 1)
}

pub fn generate_trajectory<R: Rng + ?Sized>(
    model: &SystemModel,
    attack: &AttackModel,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    Simulator::new(model).generate_trajectory(attack, horizon, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x(0..=T)`.
    pub states: Vec<DVector<f64>>,
    /// `observations[t-1][i] = y_i(t)` for `t = 1..=T`.
    pub observations: Vec<Vec<DVector<f64>>>,
    pub onset: Onset,
    pub attacked: Option<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    pub fn state(&self, t: usize) -> &DVector<f64> {
        &self.states[t]
    }

    pub fn observation(&self, t: usize, sensor: usize) -> &DVector<f64> {
        &self.observations[t - 1][sensor]
    }

    /// CSV with columns `t, x1..xp, y{i}_{k}...`; row 0 leaves the
    /// observation columns empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let p = self.states[0].len();
        let n = self.observations.first().map_or(0, |o| o.len());
        let q = self.observations.first().and_then(|o| o.first()).map_or(0, |y| y.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=p).map(|k| format!("x{k}")));
        for i in 1..=n {
            header.extend((1..=q).map(|k| format!("y{i}_{k}")));
        }
        w.write_record(&header)?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            if t == 0 {
                row.extend(std::iter::repeat_n(String::new(), n * q));
            } else {
                for y in &self.observations[t - 1] {
                    row.extend(y.iter().map(|v| v.to_string()));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(a: f64, q: f64) -> SystemModel {
        let s = SensorModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        SystemModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, q),
            DMatrix::identity(1, 1),
            vec![s],
            Topology::complete(1),
        )
        .unwrap()
    }

    #[test]
    fn identity_process_without_noise_is_fixed_point() {
        let m = scalar_model(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DVector::from_element(1, 2.5);
        assert_eq!(step_process(&m, &x, &mut rng).unwrap(), x);
    }

    #[test]
    fn non_finite_state_rejected() {
        let m = scalar_model(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(step_process(&m, &DVector::from_element(1, f64::NAN), &mut rng).is_err());
    }

    #[test]
    fn onset_rho_one_is_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(sample_attack_onset(1.0, &mut rng).unwrap(), 1);
        }
        assert!(sample_attack_onset(0.0, &mut rng).is_err());
        assert!(sample_attack_onset(1.5, &mut rng).is_err());
    }

    #[test]
    fn zero_horizon_rejected() {
        let m = scalar_model(0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_trajectory(&m, &AttackModel::none(1), 0, &mut rng).is_err());
    }

    #[test]
    fn zero_sigma_attack_is_bit_identical() {
        let m = scalar_model(0.5, 1.0);
        let sim = Simulator::new(&m);
        let attack = AttackModel::new(0, Onset::At(1), DMatrix::zeros(1, 1)).unwrap();
        let inj = GaussianNoise::new(attack.sigma());
        let x = DVector::from_element(1, 0.7);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let clean = sim.observe(0, &x, &mut r1).unwrap();
        let attacked = sim.observe_attacked(0, &attack, &inj, &x, 3, &mut r2).unwrap();
        assert_eq!(clean, attacked);
    }

    #[test]
    fn pre_onset_observation_matches_clean() {
        let m = scalar_model(0.5, 1.0);
        let sim = Simulator::new(&m);
        let attack = AttackModel::new(0, Onset::At(5), DMatrix::from_element(1, 1, 3.0)).unwrap();
        let inj = GaussianNoise::new(attack.sigma());
        let x = DVector::from_element(1, 0.7);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            sim.observe(0, &x, &mut r1).unwrap(),
            sim.observe_attacked(0, &attack, &inj, &x, 4, &mut r2).unwrap()
        );
    }
}
