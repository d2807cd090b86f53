//! Kalman consensus information filter.
//!
//! Each node fuses the information pairs `(u_j, U_j)` of its closed
//! neighbourhood, runs an information-form measurement update and adds a
//! consensus correction on the neighbours' previous estimates.
//!
//! Filter covariances never depend on the data, so [`FilterSchedule`]
//! precomputes `P_i(t)`, `M_i(t)`, `γ_i(t)` and the derived update matrices
//! once per model; [`FilterNetwork`] then runs the estimates in lockstep.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, spd_inverse, symmetrized};
use crate::model::{SensorModel, SystemModel};

/// Consensus gain rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum GainMode {
    /// Constant `γ`.
    Fixed(f64),
    /// `γ = ε / (‖P‖_F + 1)`.
    Adaptive(f64),
}

impl Default for GainMode {
    fn default() -> Self {
        GainMode::Fixed(0.05)
    }
}

impl GainMode {
    pub fn gain(self, p: &DMatrix<f64>) -> f64 {
        match self {
            GainMode::Fixed(g) => g,
            GainMode::Adaptive(eps) => eps / (p.norm() + 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFilterState {
    /// `x̂_i` at the last completed round.
    pub xhat: DVector<f64>,
    /// Prediction covariance for the next round.
    pub p: DMatrix<f64>,
    /// Estimation covariance of the last completed round.
    pub m: DMatrix<f64>,
    pub gain_mode: GainMode,
}

impl NodeFilterState {
    /// `x̂_i(0) = 0`, `P_i(1) = A·P0·A' + Q`.
    pub fn initial(model: &SystemModel, gain_mode: GainMode) -> Self {
        let p = model.state_dim();
        let a = model.a();
        Self {
            xhat: DVector::zeros(p),
            p: symmetrized(a * model.p0() * a.transpose() + model.q()),
            m: model.p0().clone(),
            gain_mode,
        }
    }

    /// `x̂_i − x`.
    pub fn estimation_error(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.xhat - x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMessage {
    pub sender: usize,
    pub xhat_prev: DVector<f64>,
    pub u: DVector<f64>,
    pub big_u: DMatrix<f64>,
}

/// `C'R⁻¹` and `U = C'R⁻¹C` for one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InformationWeights {
    pub ct_rinv: DMatrix<f64>,
    pub big_u: DMatrix<f64>,
}

impl InformationWeights {
    pub fn new(sensor: &SensorModel) -> Result<Self> {
        let r_inv = spd_inverse(sensor.r(), "R")?;
        let ct_rinv = sensor.c().transpose() * r_inv;
        let big_u = symmetrized(&ct_rinv * sensor.c());
        Ok(Self { ct_rinv, big_u })
    }

    pub fn u(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.ct_rinv * y
    }
}

/// `(u, U) = (C'R⁻¹y, C'R⁻¹C)`.
pub fn local_information(sensor: &SensorModel, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y.len() != sensor.obs_dim() {
        return Err(Error::Dimension(format!("observation has length {}", y.len())));
    }
    let w = InformationWeights::new(sensor)?;
    Ok((w.u(y), w.big_u))
}

/// Sums `u` and `U` over the messages of `node`'s closed neighbourhood.
/// `expected` lists the senders that must appear exactly once.
pub fn fuse(expected: &[usize], messages: &[ConsensusMessage]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = messages
        .first()
        .ok_or_else(|| Error::InvalidParameter("no messages to fuse".into()))?;
    let mut seen = vec![false; expected.len()];
    let mut phi = DVector::zeros(first.u.len());
    let mut s = DMatrix::zeros(first.big_u.nrows(), first.big_u.ncols());
    for msg in messages {
        let slot = expected
            .iter()
            .position(|&e| e == msg.sender)
            .ok_or_else(|| Error::InvalidParameter(format!("unexpected sender {}", msg.sender)))?;
        if seen[slot] {
            return Err(Error::InvalidParameter(format!("duplicate sender {}", msg.sender)));
        }
        seen[slot] = true;
        phi += &msg.u;
        s += &msg.big_u;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidParameter(format!("missing sender {}", expected[missing])));
    }
    Ok((phi, s))
}

pub fn consensus_gain(state: &NodeFilterState) -> f64 {
    state.gain_mode.gain(&state.p)
}

/// The estimate update shared by [`kcif_update`] and [`FilterNetwork`].
#[allow(clippy::too_many_arguments)]
fn estimate_update(
    a: &DMatrix<f64>,
    xhat_prev: &DVector<f64>,
    phi: &DVector<f64>,
    s: &DMatrix<f64>,
    m: &DMatrix<f64>,
    p: &DMatrix<f64>,
    gamma: f64,
    neighbor_estimates: &[&DVector<f64>],
) -> DVector<f64> {
    let pred = a * xhat_prev;
    let mut out = &pred + m * (phi - s * &pred);
    if !neighbor_estimates.is_empty() {
        let mut diff = DVector::zeros(xhat_prev.len());
        for xj in neighbor_estimates {
            diff += *xj - xhat_prev;
        }
        out += (p * a * diff) * gamma;
    }
    out
}

/// One filter round at a node. Returns the state holding `x̂_i(t)`,
/// `M_i(t)` and `P_i(t+1)`.
pub fn kcif_update(
    state: &NodeFilterState,
    model: &SystemModel,
    phi: &DVector<f64>,
    s: &DMatrix<f64>,
    neighbor_estimates: &[DVector<f64>],
) -> Result<NodeFilterState> {
    let p_dim = model.state_dim();
    if phi.len() != p_dim || s.shape() != (p_dim, p_dim) || state.xhat.len() != p_dim {
        return Err(Error::Dimension("kcif_update inputs".into()));
    }
    let p_inv = spd_inverse(&state.p, "P")?;
    let m = spd_inverse(&(p_inv + s), "P^-1 + S")?;
    let gamma = consensus_gain(state);
    let nbrs: Vec<&DVector<f64>> = neighbor_estimates.iter().collect();
    let xhat = estimate_update(model.a(), &state.xhat, phi, s, &m, &state.p, gamma, &nbrs);
    if !xhat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("filter estimate".into()));
    }
    let a = model.a();
    let p_next = symmetrized(a * &m * a.transpose() + model.q());
    Ok(NodeFilterState {
        xhat,
        p: p_next,
        m,
        gain_mode: state.gain_mode,
    })
}

/// Per-node, per-round quantities of the filter that do not depend on data.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGains {
    /// `P_i(t)`.
    pub p: DMatrix<f64>,
    /// `M_i(t)`.
    pub m: DMatrix<f64>,
    /// `S_i = Σ_{j∈N'_i} U_j`.
    pub s: DMatrix<f64>,
    pub gamma: f64,
    /// `A − M·S·A − γ·|N_i|·P·A`.
    pub d: DMatrix<f64>,
    /// `M·S·A`.
    pub g: DMatrix<f64>,
    /// `P·A`.
    pub f: DMatrix<f64>,
}

/// Filter gains for rounds `1..=horizon`.
#[derive(Debug, Clone)]
pub struct FilterSchedule {
    gain_mode: GainMode,
    weights: Vec<InformationWeights>,
    fused_u: Vec<DMatrix<f64>>,
    rounds: Vec<Vec<NodeGains>>,
}

impl FilterSchedule {
    pub fn new(model: &SystemModel, gain_mode: GainMode, horizon: usize) -> Result<Self> {
        let weights = model
            .sensors()
            .iter()
            .map(InformationWeights::new)
            .collect::<Result<Vec<_>>>()?;
        let topo = model.topology();
        let fused_u: Vec<DMatrix<f64>> = (0..model.num_nodes())
            .map(|i| {
                topo.closed_neighborhood(i)
                    .iter()
                    .fold(DMatrix::zeros(model.state_dim(), model.state_dim()), |acc, &j| {
                        acc + &weights[j].big_u
                    })
            })
            .collect();
        let mut schedule = Self {
            gain_mode,
            weights,
            fused_u,
            rounds: Vec::with_capacity(horizon),
        };
        let init = NodeFilterState::initial(model, gain_mode);
        let mut p_now = vec![init.p; model.num_nodes()];
        let a = model.a();
        for _ in 0..horizon {
            let mut round = Vec::with_capacity(model.num_nodes());
            for (i, p) in p_now.iter_mut().enumerate() {
                let s = schedule.fused_u[i].clone();
                let m = spd_inverse(&(spd_inverse(p, "P")? + &s), "P^-1 + S")?;
                let gamma = gain_mode.gain(p);
                let f = &*p * a;
                let g = &m * &s * a;
                let d = a - &g - &f * (gamma * topo.degree(i) as f64);
                let p_next = symmetrized(a * &m * a.transpose() + model.q());
                if !is_finite(&p_next) {
                    return Err(Error::NonFinite("prediction covariance".into()));
                }
                round.push(NodeGains {
                    p: p.clone(),
                    m,
                    s,
                    gamma,
                    d,
                    g,
                    f,
                });
                *p = p_next;
            }
            schedule.rounds.push(round);
        }
        Ok(schedule)
    }

    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    pub fn gain_mode(&self) -> GainMode {
        self.gain_mode
    }

    /// Gains of node `i` at round `t ≥ 1`.
    pub fn at(&self, t: usize, i: usize) -> &NodeGains {
        &self.rounds[t - 1][i]
    }

    pub fn weights(&self, i: usize) -> &InformationWeights {
        &self.weights[i]
    }

    pub fn fused_information(&self, i: usize) -> &DMatrix<f64> {
        &self.fused_u[i]
    }
}

/// All nodes' filters advanced in synchronous rounds.
#[derive(Debug, Clone)]
pub struct FilterNetwork<'a> {
    model: &'a SystemModel,
    schedule: &'a FilterSchedule,
    t: usize,
    estimates: Vec<DVector<f64>>,
}

impl<'a> FilterNetwork<'a> {
    pub fn new(model: &'a SystemModel, schedule: &'a FilterSchedule) -> Self {
        Self {
            model,
            schedule,
            t: 0,
            estimates: vec![DVector::zeros(model.state_dim()); model.num_nodes()],
        }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn estimates(&self) -> &[DVector<f64>] {
        &self.estimates
    }

    /// Messages every node broadcasts in the next round.
    pub fn messages(&self, observations: &[DVector<f64>]) -> Vec<ConsensusMessage> {
        observations
            .iter()
            .enumerate()
            .map(|(j, y)| ConsensusMessage {
                sender: j,
                xhat_prev: self.estimates[j].clone(),
                u: self.schedule.weights(j).u(y),
                big_u: self.schedule.weights(j).big_u.clone(),
            })
            .collect()
    }

    /// Runs round `t+1` given every sensor's observation for that round.
    pub fn step(&mut self, observations: &[DVector<f64>]) -> Result<&[DVector<f64>]> {
        let n = self.model.num_nodes();
        if observations.len() != n {
            return Err(Error::Dimension(format!("{} observations for {n} nodes", observations.len())));
        }
        let t = self.t + 1;
        if t > self.schedule.horizon() {
            return Err(Error::InvalidParameter(format!("round {t} beyond schedule horizon")));
        }
        let topo = self.model.topology();
        let msgs = self.messages(observations);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let closed = topo.closed_neighborhood(i);
            let inbox: Vec<ConsensusMessage> = closed.iter().map(|&j| msgs[j].clone()).collect();
            let (phi, s) = fuse(&closed, &inbox)?;
            let gains = self.schedule.at(t, i);
            let nbrs: Vec<&DVector<f64>> = inbox[1..].iter().map(|m| &m.xhat_prev).collect();
            next.push(estimate_update(
                self.model.a(),
                &self.estimates[i],
                &phi,
                &s,
                &gains.m,
                &gains.p,
                gains.gamma,
                &nbrs,
            ));
        }
        self.estimates = next;
        self.t = t;
        Ok(&self.estimates)
    }
}

/// Estimates `x̂_i(t)` for `t = 0..=T`, indexed `[t][i]`.
pub fn run_filters(
    model: &SystemModel,
    schedule: &FilterSchedule,
    observations: &[Vec<DVector<f64>>],
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut net = FilterNetwork::new(model, schedule);
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(net.estimates().to_vec());
    for ys in observations {
        out.push(net.step(ys)?.to_vec());
    }
    Ok(out)
}

/// CSV with columns `t, node, x1..xp, trace_m` (nodes 1-based).
pub fn write_estimates_csv<W: Write>(
    out: W,
    schedule: &FilterSchedule,
    estimates: &[Vec<DVector<f64>>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let p = estimates.first().and_then(|e| e.first()).map_or(0, |x| x.len());
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    header.push("trace_m".into());
    w.write_record(&header)?;
    for (t, round) in estimates.iter().enumerate() {
        for (i, x) in round.iter().enumerate() {
            let mut row = vec![t.to_string(), (i + 1).to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(if t == 0 {
                String::new()
            } else {
                schedule.at(t, i).m.trace().to_string()
            });
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
