//! Precompiled conditional laws for fast per-trial evaluation.
//!
//! Laws depend only on the model, the filter gains and the attack hypothesis,
//! so they are built once per experiment. Attacked laws are kept for every
//! hypothesised sensor `l`, every onset `m ≤ T` and the rounds
//! `t ∈ [m, m + window − 1]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{floored, CompiledLaw};
use crate::kcif::FilterSchedule;
use crate::model::SystemModel;
use crate::moments::conditional::{factor_law, gather, layout, FactorKind, FactorLayout};
use crate::moments::{propagate_from, AttackContext, MomentHistory, MomentMode, MomentPath};

/// Compiled laws of node `i` at one round.
#[derive(Debug, Clone)]
pub struct NodeLaws {
    pub own: Option<CompiledLaw>,
    /// Aligned with the node's neighbour list.
    pub neighbors: Vec<Option<CompiledLaw>>,
    pub observation: Option<CompiledLaw>,
}

impl NodeLaws {
    fn build(
        path: &MomentPath<'_>,
        model: &SystemModel,
        schedule: &FilterSchedule,
        i: usize,
        t: usize,
        full: bool,
    ) -> Result<Self> {
        let compile = |kind| -> Result<Option<CompiledLaw>> {
            factor_law(path, model, schedule, kind, i, t)?
                .map(|law| law.compile())
                .transpose()
        };
        let own = compile(FactorKind::Own)?;
        if !full {
            return Ok(Self {
                own,
                neighbors: Vec::new(),
                observation: None,
            });
        }
        let neighbors = model
            .topology()
            .neighbors(i)
            .iter()
            .map(|&j| compile(FactorKind::Neighbor(j)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            own,
            neighbors,
            observation: compile(FactorKind::Observation)?,
        })
    }

    /// Floored log-density of the own-estimate factor (0 if undefined).
    pub fn own_log_pdf(&self, data: &NodeData) -> (f64, u32) {
        eval(self.own.as_ref(), data.own.as_ref())
    }

    /// Per-factor floored log-densities: own, neighbours..., observation.
    pub fn factor_log_pdfs(&self, data: &NodeData, out: &mut Vec<f64>) -> u32 {
        out.clear();
        let mut hits = 0;
        let (v, h) = eval(self.own.as_ref(), data.own.as_ref());
        out.push(v);
        hits += h;
        for (law, d) in self.neighbors.iter().zip(&data.neighbors) {
            let (v, h) = eval(law.as_ref(), d.as_ref());
            out.push(v);
            hits += h;
        }
        let (v, h) = eval(self.observation.as_ref(), data.observation.as_ref());
        out.push(v);
        hits + h
    }
}

#[inline]
fn eval(law: Option<&CompiledLaw>, data: Option<&FactorData>) -> (f64, u32) {
    match (law, data) {
        (Some(law), Some(d)) => {
            let (v, hit) = floored(law.log_pdf(&d.target, &d.cond));
            (v, u32::from(hit))
        }
        _ => (0.0, 0),
    }
}

/// Realised target and conditioning values of one factor.
#[derive(Debug, Clone, Default)]
pub struct FactorData {
    pub target: Vec<f64>,
    pub cond: Vec<f64>,
}

/// Realised values of all of node `i`'s factors at one round.
#[derive(Debug, Clone, Default)]
pub struct NodeData {
    pub own: Option<FactorData>,
    pub neighbors: Vec<Option<FactorData>>,
    pub observation: Option<FactorData>,
}

/// Per-round, per-node factor data of one trial, `[t−1][i]` for
/// `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct TrialData {
    rounds: Vec<Vec<NodeData>>,
}

impl TrialData {
    pub fn new(
        model: &SystemModel,
        estimates: &[Vec<DVector<f64>>],
        observations: &[Vec<DVector<f64>>],
        full: bool,
    ) -> Self {
        let n = model.num_nodes();
        let horizon = observations.len();
        let fetch = |lay: Option<FactorLayout>| {
            lay.map(|lay| {
                let mut d = FactorData::default();
                gather(&lay, estimates, observations, &mut d.target, &mut d.cond);
                d
            })
        };
        let rounds = (1..=horizon)
            .map(|t| {
                (0..n)
                    .map(|i| {
                        let own = fetch(layout(model, FactorKind::Own, i, t));
                        if !full {
                            return NodeData {
                                own,
                                ..NodeData::default()
                            };
                        }
                        NodeData {
                            own,
                            neighbors: model
                                .topology()
                                .neighbors(i)
                                .iter()
                                .map(|&j| fetch(layout(model, FactorKind::Neighbor(j), i, t)))
                                .collect(),
                            observation: fetch(layout(model, FactorKind::Observation, i, t)),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { rounds }
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    pub fn at(&self, t: usize, i: usize) -> &NodeData {
        &self.rounds[t - 1][i]
    }
}

/// Attacked laws for one injected covariance.
#[derive(Debug, Clone)]
pub struct SigmaTables {
    pub sigma: DMatrix<f64>,
    /// Whether neighbour and observation laws are included.
    pub full: bool,
    /// `[l][m−1][t−m][i]`.
    banks: Vec<Vec<Vec<Vec<NodeLaws>>>>,
}

#[derive(Debug, Clone)]
pub struct LawTables {
    horizon: usize,
    window: usize,
    clean: Vec<Vec<NodeLaws>>,
    sigmas: Vec<SigmaTables>,
}

impl LawTables {
    /// `sigmas` lists the injected covariances and whether each needs the
    /// full factor set. `window` is the number of rounds kept after each
    /// onset.
    pub fn build(
        model: &SystemModel,
        schedule: &FilterSchedule,
        sigmas: &[(DMatrix<f64>, bool)],
        horizon: usize,
        window: usize,
        mode: MomentMode,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidParameter("law window must be at least 1".into()));
        }
        let n = model.num_nodes();
        let clean_hist = MomentHistory::new(model, schedule, &AttackContext::none(model.obs_dim()), horizon, mode)?;
        let any_full = sigmas.iter().any(|(_, f)| *f);
        let path = clean_hist.path();
        let clean = (1..=horizon)
            .map(|t| {
                (0..n)
                    .map(|i| NodeLaws::build(&path, model, schedule, i, t, any_full))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let jobs: Vec<(usize, usize)> = (0..sigmas.len()).flat_map(|s| (0..n).map(move |l| (s, l))).collect();
        let workers = std::thread::available_parallelism().map_or(1, |v| v.get()).min(jobs.len().max(1));
        let results: Vec<Result<(usize, usize, Vec<Vec<Vec<NodeLaws>>>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let clean_hist = &clean_hist;
                    scope.spawn(move || {
                        jobs.iter()
                            .skip(w)
                            .step_by(workers)
                            .map(|&(s, l)| {
                                let (sigma, full) = &sigmas[s];
                                let bank =
                                    hypothesis_bank(model, schedule, clean_hist, sigma, *full, l, horizon, window, mode)?;
                                Ok((s, l, bank))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("law table worker panicked"))
                .collect()
        });
        let mut banks: Vec<Vec<Option<Vec<Vec<Vec<NodeLaws>>>>>> =
            (0..sigmas.len()).map(|_| (0..n).map(|_| None).collect()).collect();
        for r in results {
            let (s, l, bank) = r?;
            banks[s][l] = Some(bank);
        }
        let sigmas = sigmas
            .iter()
            .zip(banks)
            .map(|((sigma, full), b)| SigmaTables {
                sigma: sigma.clone(),
                full: *full,
                banks: b.into_iter().map(|x| x.expect("every bank built")).collect(),
            })
            .collect();
        Ok(Self {
            horizon,
            window,
            clean,
            sigmas,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_sigmas(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigma(&self, s: usize) -> &SigmaTables {
        &self.sigmas[s]
    }

    pub fn clean(&self, t: usize, i: usize) -> &NodeLaws {
        &self.clean[t - 1][i]
    }

    /// Laws at node `i`, round `t`, if sensor `l` was attacked with
    /// covariance `s` from onset `m` (`m ≤ t < m + window`).
    pub fn attacked(&self, s: usize, l: usize, m: usize, t: usize, i: usize) -> &NodeLaws {
        debug_assert!(m >= 1 && m <= t && t - m < self.window);
        &self.sigmas[s].banks[l][m - 1][t - m][i]
    }
}

#[allow(clippy::too_many_arguments)]
fn hypothesis_bank(
    model: &SystemModel,
    schedule: &FilterSchedule,
    clean: &MomentHistory,
    sigma: &DMatrix<f64>,
    full: bool,
    l: usize,
    horizon: usize,
    window: usize,
    mode: MomentMode,
) -> Result<Vec<Vec<Vec<NodeLaws>>>> {
    let n = model.num_nodes();
    (1..=horizon)
        .map(|m| {
            let ctx = AttackContext::new(l, m, sigma.clone())?;
            let end = (m + window - 1).min(horizon);
            let branch = propagate_from(clean.at(m - 1), end, model, schedule, &ctx, mode)?;
            let path = MomentPath::branched(clean.sets(), &branch, m);
            (m..=end)
                .map(|t| {
                    (0..n)
                        .map(|i| NodeLaws::build(&path, model, schedule, i, t, full))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcif::{run_filters, GainMode};
    use crate::model::{AttackModel, Topology};
    use crate::sim::generate_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_tables_match_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SystemModel::random(&mut rng, 2, 2, Topology::five_node(), 0.95).unwrap();
        let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), 10).unwrap();
        let tables =
            LawTables::build(&model, &sched, &[(DMatrix::zeros(2, 2), true)], 10, 4, MomentMode::Local).unwrap();
        let traj = generate_trajectory(&model, &AttackModel::none(2), 10, &mut rng).unwrap();
        let est = run_filters(&model, &sched, &traj.observations).unwrap();
        let data = TrialData::new(&model, &est, &traj.observations, true);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for t in 3..=10 {
            for i in 0..5 {
                tables.clean(t, i).factor_log_pdfs(data.at(t, i), &mut a);
                tables.attacked(0, 2, t - 1, t, i).factor_log_pdfs(data.at(t, i), &mut b);
                assert_eq!(a, b);
            }
        }
    }
}
