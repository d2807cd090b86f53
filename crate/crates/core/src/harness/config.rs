//! TOML experiment configuration.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcif::GainMode;
use crate::linalg::from_rows;
use crate::model::{SensorModel, SystemModel, Topology};
use crate::moments::MomentMode;
use crate::nonbayes::default_window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub bayes: BayesConfig,
    #[serde(default)]
    pub nonbayes: NonBayesConfig,
    #[serde(default)]
    pub chi2: Chi2Config,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub detectors: DetectorSelection,
    /// 1-based node whose curves are reported in the summary checks.
    #[serde(default = "default_report_node")]
    pub report_node: usize,
}

fn default_report_node() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    /// 1-based undirected edges.
    pub edges: Vec<[usize; 2]>,
    pub state_dim: usize,
    pub obs_dim: usize,
    #[serde(default)]
    pub random: Option<RandomModel>,
    #[serde(default)]
    pub explicit: Option<ExplicitModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomModel {
    pub seed: u64,
    #[serde(default = "default_max_radius")]
    pub max_spectral_radius: f64,
}

fn default_max_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitModel {
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub p0: Vec<Vec<f64>>,
    /// One matrix per sensor.
    pub c: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub gain: GainMode,
    #[serde(default)]
    pub moments: MomentMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            gain: GainMode::Fixed(0.05),
            moments: MomentMode::Local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// 1-based attacked sensor.
    pub sensor: usize,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesConfig {
    pub rho: f64,
    pub onset_window: usize,
    pub initial_threshold: f64,
    pub alphas: Vec<f64>,
    pub include_self_hypothesis: bool,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            onset_window: 20,
            initial_threshold: 0.5,
            alphas: vec![0.05, 0.1, 0.2],
            include_self_hypothesis: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonBayesConfig {
    pub arl_targets: Vec<f64>,
    /// `t_γ`; 0 selects `5·⌈ln(max arl target)⌉`.
    #[serde(default)]
    pub window: usize,
    /// Candidate covariances for the GLR, as multiples of the identity.
    pub theta_scales: Vec<f64>,
    /// Fixed onset for the delay runs.
    pub onset: usize,
    pub initial_threshold: f64,
    pub include_self_hypothesis: bool,
}

impl Default for NonBayesConfig {
    fn default() -> Self {
        Self {
            arl_targets: vec![20.0, 40.0, 80.0],
            window: 0,
            theta_scales: vec![0.75, 1.5, 3.0, 6.0, 12.0],
            onset: 1,
            initial_threshold: 5.0,
            include_self_hypothesis: false,
        }
    }
}

impl NonBayesConfig {
    pub fn effective_window(&self) -> usize {
        if self.window > 0 {
            return self.window;
        }
        let max_arl = self.arl_targets.iter().copied().fold(1.0, f64::max);
        default_window(max_arl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chi2Config {
    pub window: usize,
    pub initial_threshold: f64,
}

impl Default for Chi2Config {
    fn default() -> Self {
        Self {
            window: 3,
            initial_threshold: 15.0,
        }
    }
}

/// Robbins–Monro step sizes `a(j) = a0 / j`, one `a0` per threshold scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub a0_bayes: f64,
    pub a0_chi2_pfa: f64,
    pub a0_run_length: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            a0_bayes: 3.0,
            a0_chi2_pfa: 20.0,
            a0_run_length: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSelection {
    pub bayes: bool,
    pub msprt: bool,
    pub glr: bool,
    pub chi2: bool,
}

impl Default for DetectorSelection {
    fn default() -> Self {
        Self {
            bayes: true,
            msprt: true,
            glr: true,
            chi2: true,
        }
    }
}

impl DetectorSelection {
    /// Parses a comma-separated list such as `bayes,chi2`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut sel = Self {
            bayes: false,
            msprt: false,
            glr: false,
            chi2: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "bayes" => sel.bayes = true,
                "msprt" => sel.msprt = true,
                "glr" => sel.glr = true,
                "chi2" => sel.chi2 = true,
                other => return Err(Error::Config(format!("unknown detector '{other}'"))),
            }
        }
        Ok(sel)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.attack.sensor == 0 || self.attack.sensor > self.model.nodes {
            return bad("attack.sensor must be a 1-based node index");
        }
        if self.report_node == 0 || self.report_node > self.model.nodes {
            return bad("report_node must be a 1-based node index");
        }
        if !(self.bayes.rho > 0.0 && self.bayes.rho < 1.0) {
            return bad("bayes.rho must lie in (0, 1)");
        }
        if self.bayes.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad("every alpha must lie in (0, 1)");
        }
        if self.nonbayes.arl_targets.iter().any(|&g| g <= 1.0) {
            return bad("arl targets must exceed 1");
        }
        if self.nonbayes.onset == 0 {
            return bad("nonbayes.onset must be at least 1");
        }
        if self.nonbayes.theta_scales.is_empty() || self.nonbayes.theta_scales.iter().any(|&s| s < 0.0) {
            return bad("theta_scales must be a nonempty list of nonnegative scales");
        }
        if self.chi2.window == 0 || self.bayes.onset_window == 0 {
            return bad("windows must be at least 1");
        }
        if self.model.random.is_some() == self.model.explicit.is_some() {
            return bad("exactly one of model.random and model.explicit must be given");
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology> {
        let edges: Vec<(usize, usize)> = self
            .model
            .edges
            .iter()
            .map(|&[a, b]| {
                if a == 0 || b == 0 {
                    Err(Error::Config("edges use 1-based node indices".into()))
                } else {
                    Ok((a - 1, b - 1))
                }
            })
            .collect::<Result<_>>()?;
        Topology::from_edges(self.model.nodes, &edges)
    }

    pub fn system_model(&self) -> Result<SystemModel> {
        let topo = self.topology()?;
        let (p, q) = (self.model.state_dim, self.model.obs_dim);
        if let Some(r) = &self.model.random {
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            return SystemModel::random(&mut rng, p, q, topo, r.max_spectral_radius);
        }
        let e = self.model.explicit.as_ref().expect("validated");
        if e.c.len() != self.model.nodes || e.r.len() != self.model.nodes {
            return Err(Error::Config("one C and one R per sensor are required".into()));
        }
        let sensors = e
            .c
            .iter()
            .zip(&e.r)
            .map(|(c, r)| SensorModel::new(from_rows(c)?, from_rows(r)?))
            .collect::<Result<Vec<_>>>()?;
        SystemModel::new(from_rows(&e.a)?, from_rows(&e.q)?, from_rows(&e.p0)?, sensors, topo)
    }

    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        from_rows(&self.attack.sigma)
    }

    /// 0-based attacked sensor.
    pub fn attacked(&self) -> usize {
        self.attack.sensor - 1
    }

    pub fn theta(&self) -> Vec<DMatrix<f64>> {
        let q = self.model.obs_dim;
        self.nonbayes
            .theta_scales
            .iter()
            .map(|&s| DMatrix::identity(q, q) * s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 1
trials = 10
horizon = 20

[model]
nodes = 2
edges = [[1, 2]]
state_dim = 1
obs_dim = 1

[model.random]
seed = 3

[attack]
sensor = 2
sigma = [[3.0]]
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.bayes.rho, 0.05);
        assert_eq!(cfg.filter.gain, GainMode::Fixed(0.05));
        assert_eq!(cfg.nonbayes.effective_window(), 25);
        let model = cfg.system_model().unwrap();
        assert_eq!(model.num_nodes(), 2);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = SMALL.replace("trials = 10", "trials = 0");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = SMALL.replace("sensor = 2", "sensor = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = SMALL.replace("edges = [[1, 2]]", "edges = [[0, 1]]");
        assert!(ExperimentConfig::from_toml(&bad).unwrap().topology().is_err());
    }

    #[test]
    fn detector_list() {
        let s = DetectorSelection::parse("bayes, chi2").unwrap();
        assert!(s.bayes && s.chi2 && !s.msprt && !s.glr);
        assert!(DetectorSelection::parse("cusum").is_err());
    }
}
