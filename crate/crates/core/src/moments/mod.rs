//! Second moments of the state and the filter estimates.
//!
//! Write `z = [x; x̂_a; x̂_b; ...]` for the state stacked with the estimates of
//! a set of nodes. One filter round maps `z(t−1)` to `z(t) = Φ·z(t−1) + n(t)`,
//! where node `a`'s row of `Φ` is `[G_a, D_a at a, γF_a at each neighbour]`
//! and `n` collects process and measurement noise. Propagating `cov(z)` with
//! every node included gives the exact moments ([`exact`]).
//!
//! The local recursion keeps, for each node `i`, the joint covariance of
//! `[x; x̂_i; x̂_{N_i}]` only. Neighbours of members that lie outside `N'_i`
//! are dropped from `Φ` (their cross-moments are taken as zero); the
//! measurement noise is kept exact. Each view is
//! propagated on its own, so it is the exact covariance of a truncated
//! process and stays positive semidefinite; the conditional laws of node `i`
//! are assembled from view `i` alone. `L_i`, `H_i` and the lags of node `i`
//! are read from the centre row of view `i`.

pub mod conditional;
pub mod exact;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcif::{FilterSchedule, NodeGains};
use crate::linalg::{is_finite, symmetrize};
use crate::model::{AttackModel, SystemModel};

pub use conditional::{
    cond_dist_neighbor_estimate, cond_dist_observation, cond_dist_own_estimate, factor_blocks, neighbor_law, observation_law,
    own_law, post_attack_variants, AttackedLaws, FactorKind,
};

/// Whether conditional laws use the local recursion or exact moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentMode {
    #[default]
    Local,
    Exact,
}

/// Which sensor is attacked, from when, and with what covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackContext {
    attacked: Option<usize>,
    onset: Option<usize>,
    sigma: DMatrix<f64>,
}

impl AttackContext {
    pub fn none(obs_dim: usize) -> Self {
        Self {
            attacked: None,
            onset: None,
            sigma: DMatrix::zeros(obs_dim, obs_dim),
        }
    }

    pub fn new(attacked: usize, onset: usize, sigma: DMatrix<f64>) -> Result<Self> {
        if onset == 0 {
            return Err(Error::InvalidParameter("attack onset must be at least 1".into()));
        }
        Ok(Self {
            attacked: Some(attacked),
            onset: Some(onset),
            sigma,
        })
    }

    pub fn from_attack(attack: &AttackModel) -> Self {
        match attack.onset().time() {
            Some(m) => Self {
                attacked: Some(attack.target()),
                onset: Some(m),
                sigma: attack.sigma().clone(),
            },
            None => Self::none(attack.sigma().nrows()),
        }
    }

    pub fn attacked(&self) -> Option<usize> {
        self.attacked
    }

    pub fn onset(&self) -> Option<usize> {
        self.onset
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn active(&self, sensor: usize, t: usize) -> bool {
        matches!((self.attacked, self.onset), (Some(s), Some(m)) if s == sensor && t >= m)
    }
}

/// Measurement-noise covariances `R̃_s(t)` and their information-space
/// images `C'R⁻¹R̃R⁻¹C` at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundNoise {
    pub r: Vec<DMatrix<f64>>,
    pub info: Vec<DMatrix<f64>>,
}

impl RoundNoise {
    pub fn new(model: &SystemModel, schedule: &FilterSchedule, ctx: &AttackContext, t: usize) -> Self {
        let n = model.num_nodes();
        let mut r = Vec::with_capacity(n);
        let mut info = Vec::with_capacity(n);
        for s in 0..n {
            let w = schedule.weights(s);
            if ctx.active(s, t) {
                r.push(model.sensor(s).r() + ctx.sigma());
                info.push(&w.big_u + &w.ct_rinv * ctx.sigma() * w.ct_rinv.transpose());
            } else {
                r.push(model.sensor(s).r().clone());
                info.push(w.big_u.clone());
            }
        }
        Self { r, info }
    }
}

/// `B = A·B_prev·A' + Q`.
pub fn propagate_b(b_prev: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = a * b_prev * a.transpose() + q;
    symmetrize(&mut b);
    b
}

/// Joint covariance of `z = [x; x̂_{members...}]` as seen from one node,
/// and its lag-one cross-covariance `cov(z(t), z(t−1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMoments {
    pub members: Vec<usize>,
    pub joint: DMatrix<f64>,
    pub lag: DMatrix<f64>,
}

impl ViewMoments {
    fn zeros(members: Vec<usize>, p: usize, b: &DMatrix<f64>) -> Self {
        let dim = p * (members.len() + 1);
        let mut joint = DMatrix::zeros(dim, dim);
        joint.view_mut((0, 0), (p, p)).copy_from(b);
        Self {
            members,
            joint,
            lag: DMatrix::zeros(dim, dim),
        }
    }

    pub fn position(&self, node: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == node)
    }

    fn block(&self, a: usize, b: usize, p: usize) -> DMatrix<f64> {
        self.joint.view((a * p, b * p), (p, p)).into_owned()
    }
}

/// All second moments at one time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub t: usize,
    p: usize,
    /// `cov(x(t))`.
    pub b: DMatrix<f64>,
    /// `cov(x̂_i(t))`.
    pub l: Vec<DMatrix<f64>>,
    /// `cov(x̂_i(t), x(t))`.
    pub h: Vec<DMatrix<f64>>,
    pub views: Vec<ViewMoments>,
    /// `cov(x̂_i(t), x̂_j(t−1))` for `j ∈ N_i`, in neighbour order.
    pub j: Vec<Vec<DMatrix<f64>>>,
    /// `cov(x̂_i(t), x̂_i(t−1))`.
    pub own_lag: Vec<DMatrix<f64>>,
    /// `R̃_s(t)`; equals `R_s` at `t = 0`.
    pub r: Vec<DMatrix<f64>>,
    /// Full joint covariance of `[x; x̂_1; ...; x̂_N]`, kept by the exact
    /// propagation only.
    pub global: Option<DMatrix<f64>>,
}

impl MomentSet {
    /// Moments at `t = 0`: `B = P0`, every estimate-related block zero.
    pub fn initial(model: &SystemModel) -> Self {
        let p = model.state_dim();
        let n = model.num_nodes();
        let topo = model.topology();
        let views = (0..n)
            .map(|i| ViewMoments::zeros(topo.closed_neighborhood(i), p, model.p0()))
            .collect();
        Self {
            t: 0,
            p,
            b: model.p0().clone(),
            l: vec![DMatrix::zeros(p, p); n],
            h: vec![DMatrix::zeros(p, p); n],
            views,
            j: (0..n).map(|i| vec![DMatrix::zeros(p, p); topo.degree(i)]).collect(),
            own_lag: vec![DMatrix::zeros(p, p); n],
            r: model.sensors().iter().map(|s| s.r().clone()).collect(),
            global: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.p
    }

    pub fn num_nodes(&self) -> usize {
        self.l.len()
    }

    /// `cov(x̂_a(t), x̂_b(t))` as stored at node `i`, or `None` if either
    /// estimate lies outside `N'_i` (treated as zero by callers).
    pub fn cross(&self, i: usize, a: usize, b: usize) -> Option<DMatrix<f64>> {
        if a == b {
            return Some(self.l[a].clone());
        }
        let view = &self.views[i];
        let pa = view.position(a)?;
        let pb = view.position(b)?;
        Some(view.block(pa + 1, pb + 1, self.p))
    }

    /// `cov(x̂_a(t), x̂_b(t))` at node `i`, zero when not stored.
    pub fn t(&self, i: usize, a: usize, b: usize) -> DMatrix<f64> {
        self.cross(i, a, b).unwrap_or_else(|| DMatrix::zeros(self.p, self.p))
    }

    /// `cov(x̂_a(t), x̂_b(t))` within node `i`'s view, `a, b ∈ N'_i`.
    pub fn view_t(&self, i: usize, a: usize, b: usize) -> Option<DMatrix<f64>> {
        let view = &self.views[i];
        Some(view.block(view.position(a)? + 1, view.position(b)? + 1, self.p))
    }

    /// `cov(x̂_a(t), x(t))` within node `i`'s view.
    pub fn view_h(&self, i: usize, a: usize) -> Option<DMatrix<f64>> {
        let view = &self.views[i];
        Some(view.block(view.position(a)? + 1, 0, self.p))
    }

    /// `cov(x̂_a(t), x̂_b(t−1))` within node `i`'s view.
    pub fn view_lag(&self, i: usize, a: usize, b: usize) -> Option<DMatrix<f64>> {
        let view = &self.views[i];
        let (pa, pb) = (view.position(a)? + 1, view.position(b)? + 1);
        Some(view.lag.view((pa * self.p, pb * self.p), (self.p, self.p)).into_owned())
    }

    /// `cov(x̂_i(t), x̂_j(t−1))` for a neighbour `j` of `i`.
    pub fn j_block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        let pos = self.views[i].position(j)?;
        if pos == 0 {
            return None;
        }
        self.j[i].get(pos - 1)
    }

    fn check_finite(&self) -> Result<()> {
        let ok = is_finite(&self.b)
            && self.l.iter().all(is_finite)
            && self.h.iter().all(is_finite)
            && self.views.iter().all(|v| is_finite(&v.joint))
            && self.j.iter().flatten().all(is_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("moments at t = {}", self.t)))
        }
    }

    /// Rows `(t, symbol, i, j, entries...)` with 1-based node indices and
    /// matrices flattened row-major. `T` rows are written for each view.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut emit = |symbol: &str, i: String, j: String, m: &DMatrix<f64>| -> Result<()> {
            let mut row = vec![self.t.to_string(), symbol.to_string(), i, j];
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    row.push(m[(r, c)].to_string());
                }
            }
            w.write_record(&row)?;
            Ok(())
        };
        emit("B", String::new(), String::new(), &self.b)?;
        for (i, l) in self.l.iter().enumerate() {
            emit("L", (i + 1).to_string(), String::new(), l)?;
        }
        for (i, h) in self.h.iter().enumerate() {
            emit("H", (i + 1).to_string(), String::new(), h)?;
        }
        for (i, view) in self.views.iter().enumerate() {
            for (pa, &a) in view.members.iter().enumerate() {
                for (pb, &b) in view.members.iter().enumerate() {
                    if pa < pb {
                        let sym = format!("T@{}", i + 1);
                        emit(&sym, (a + 1).to_string(), (b + 1).to_string(), &view.block(pa + 1, pb + 1, self.p))?;
                    }
                }
            }
            for (k, &nb) in view.members[1..].iter().enumerate() {
                emit("J", (i + 1).to_string(), (nb + 1).to_string(), &self.j[i][k])?;
            }
        }
        Ok(())
    }
}

/// Transition rows and noise of `z = [x; x̂_members]` over one round. Node
/// `a`'s consensus term keeps only neighbours inside `members`, and
/// measurement noise is summed over all senders in `N'_a ∩ N'_b`.
pub(crate) fn joint_transition(
    model: &SystemModel,
    gains: &[NodeGains],
    noise: &RoundNoise,
    members: &[usize],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = model.state_dim();
    let k = members.len();
    let dim = p * (k + 1);
    let topo = model.topology();
    let mut phi = DMatrix::zeros(dim, dim);
    phi.view_mut((0, 0), (p, p)).copy_from(model.a());
    let mut ms = Vec::with_capacity(k);
    for (pa, &a) in members.iter().enumerate() {
        let g = &gains[a];
        let row = (pa + 1) * p;
        phi.view_mut((row, 0), (p, p)).copy_from(&g.g);
        phi.view_mut((row, row), (p, p)).copy_from(&g.d);
        let gf = &g.f * g.gamma;
        for &r in topo.neighbors(a) {
            if let Some(pr) = members.iter().position(|&m| m == r) {
                phi.view_mut((row, (pr + 1) * p), (p, p)).copy_from(&gf);
            }
        }
        ms.push(&g.m * &g.s);
    }
    // W = Σ_w + Σ_v, assembled blockwise to keep the sender restriction explicit.
    let q = model.q();
    let mut w = DMatrix::zeros(dim, dim);
    w.view_mut((0, 0), (p, p)).copy_from(q);
    for (pa, &a) in members.iter().enumerate() {
        let ra = (pa + 1) * p;
        let xq = &ms[pa] * q;
        w.view_mut((ra, 0), (p, p)).copy_from(&xq);
        w.view_mut((0, ra), (p, p)).copy_from(&xq.transpose());
        for (pb, &b) in members.iter().enumerate() {
            let rb = (pb + 1) * p;
            let mut inner = &xq * ms[pb].transpose();
            let mut shared = DMatrix::zeros(p, p);
            let mut any = false;
            for s in topo.closed_neighborhood(a) {
                if topo.in_closed(b, s) {
                    shared += &noise.info[s];
                    any = true;
                }
            }
            if any {
                inner += &gains[a].m * shared * gains[b].m.transpose();
            }
            w.view_mut((ra, rb), (p, p)).copy_from(&inner);
        }
    }
    (phi, w)
}

/// One round of the local recursion: moments at `t` from moments at `t−1`.
pub fn update_unconditional_moments(
    prev: &MomentSet,
    model: &SystemModel,
    schedule: &FilterSchedule,
    ctx: &AttackContext,
) -> Result<MomentSet> {
    let t = prev.t + 1;
    let p = prev.p;
    let n = model.num_nodes();
    if prev.num_nodes() != n || p != model.state_dim() {
        return Err(Error::Dimension("moment set does not match model".into()));
    }
    if t > schedule.horizon() {
        return Err(Error::InvalidParameter(format!("round {t} beyond schedule horizon")));
    }
    let gains: Vec<NodeGains> = (0..n).map(|i| schedule.at(t, i).clone()).collect();
    let noise = RoundNoise::new(model, schedule, ctx, t);
    let b = propagate_b(&prev.b, model.a(), model.q());
    let mut views = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    let mut j = Vec::with_capacity(n);
    let mut own_lag = Vec::with_capacity(n);
    for view in &prev.views {
        let (phi, w) = joint_transition(model, &gains, &noise, &view.members);
        let lag = &phi * &view.joint;
        let mut joint = &lag * phi.transpose() + w;
        symmetrize(&mut joint);
        l.push(joint.view((p, p), (p, p)).into_owned());
        h.push(joint.view((p, 0), (p, p)).into_owned());
        own_lag.push(lag.view((p, p), (p, p)).into_owned());
        j.push(
            (1..view.members.len())
                .map(|k| lag.view((p, (k + 1) * p), (p, p)).into_owned())
                .collect(),
        );
        views.push(ViewMoments {
            members: view.members.clone(),
            joint,
            lag,
        });
    }
    let set = MomentSet {
        t,
        p,
        b,
        l,
        h,
        views,
        j,
        own_lag,
        r: noise.r,
        global: None,
    };
    set.check_finite()?;
    Ok(set)
}

/// Moments for `t = start..=end` under `ctx`, continuing from `from`
/// (the set at `start − 1`).
pub fn propagate_from(
    from: &MomentSet,
    end: usize,
    model: &SystemModel,
    schedule: &FilterSchedule,
    ctx: &AttackContext,
    mode: MomentMode,
) -> Result<Vec<MomentSet>> {
    match mode {
        MomentMode::Local => {
            let mut out: Vec<MomentSet> = Vec::with_capacity(end.saturating_sub(from.t));
            let mut cur = from;
            let mut owned;
            while cur.t < end {
                owned = update_unconditional_moments(cur, model, schedule, ctx)?;
                out.push(owned);
                cur = out.last().expect("just pushed");
            }
            Ok(out)
        }
        MomentMode::Exact => exact::propagate_from(from, end, model, schedule, ctx),
    }
}

/// Moments for `t = 0..=horizon` under one attack context.
#[derive(Debug, Clone)]
pub struct MomentHistory {
    sets: Vec<MomentSet>,
}

impl MomentHistory {
    pub fn new(
        model: &SystemModel,
        schedule: &FilterSchedule,
        ctx: &AttackContext,
        horizon: usize,
        mode: MomentMode,
    ) -> Result<Self> {
        let init = match mode {
            MomentMode::Local => MomentSet::initial(model),
            MomentMode::Exact => exact::initial(model),
        };
        let mut sets = vec![init];
        sets.extend(propagate_from(&sets[0], horizon, model, schedule, ctx, mode)?);
        Ok(Self { sets })
    }

    pub fn horizon(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn at(&self, t: usize) -> &MomentSet {
        &self.sets[t]
    }

    pub fn sets(&self) -> &[MomentSet] {
        &self.sets
    }

    pub fn path(&self) -> MomentPath<'_> {
        MomentPath::clean(&self.sets)
    }

    /// CSV dump: `t, symbol, i, j, m11, m12, ...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let p = self.sets[0].p;
        let mut header = vec!["t".to_string(), "symbol".into(), "i".into(), "j".into()];
        for r in 1..=p {
            for c in 1..=p {
                header.push(format!("m{r}{c}"));
            }
        }
        w.write_record(&header)?;
        for set in &self.sets {
            set.write_csv_rows(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Moments over time where rounds from `start` on come from an attacked
/// branch and earlier rounds from the clean history.
#[derive(Debug, Clone, Copy)]
pub struct MomentPath<'a> {
    prefix: &'a [MomentSet],
    branch: &'a [MomentSet],
    start: usize,
}

impl<'a> MomentPath<'a> {
    pub fn clean(sets: &'a [MomentSet]) -> Self {
        Self {
            prefix: sets,
            branch: &[],
            start: usize::MAX,
        }
    }

    /// `branch[k]` holds the moments at `start + k`.
    pub fn branched(prefix: &'a [MomentSet], branch: &'a [MomentSet], start: usize) -> Self {
        Self { prefix, branch, start }
    }

    pub fn at(&self, t: usize) -> &'a MomentSet {
        if t >= self.start {
            &self.branch[t - self.start]
        } else {
            &self.prefix[t]
        }
    }

    pub fn last_time(&self) -> usize {
        if self.branch.is_empty() {
            self.prefix.len() - 1
        } else {
            self.start + self.branch.len() - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcif::GainMode;
    use crate::linalg::{is_psd, psd_leq};
    use crate::model::Topology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(topo: Topology) -> (SystemModel, FilterSchedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = SystemModel::random(&mut rng, 2, 2, topo, 0.95).unwrap();
        let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), 30).unwrap();
        (model, sched)
    }

    #[test]
    fn b_fixed_points() {
        let i = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(propagate_b(&b, &i, &DMatrix::zeros(2, 2)), b);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        assert_eq!(propagate_b(&b, &DMatrix::zeros(2, 2), &q), q);
    }

    #[test]
    fn local_equals_exact_on_complete_graph() {
        let (model, sched) = setup(Topology::complete(3));
        let ctx = AttackContext::none(2);
        let local = MomentHistory::new(&model, &sched, &ctx, 20, MomentMode::Local).unwrap();
        let exact = MomentHistory::new(&model, &sched, &ctx, 20, MomentMode::Exact).unwrap();
        for t in 0..=20 {
            let (a, b) = (local.at(t), exact.at(t));
            for i in 0..3 {
                assert!((&a.l[i] - &b.l[i]).norm() < 1e-10 * (1.0 + b.l[i].norm()));
                assert!((&a.h[i] - &b.h[i]).norm() < 1e-10 * (1.0 + b.h[i].norm()));
                for k in 0..3 {
                    assert!((a.t(i, i, k) - b.t(i, i, k)).norm() < 1e-10 * (1.0 + b.l[i].norm()));
                }
                for (x, y) in a.j[i].iter().zip(&b.j[i]) {
                    assert!((x - y).norm() < 1e-10 * (1.0 + y.norm()));
                }
            }
        }
    }

    #[test]
    fn covariances_stay_psd_on_sparse_graph() {
        let (model, sched) = setup(Topology::five_node());
        let ctx = AttackContext::new(1, 3, DMatrix::identity(2, 2) * 3.0).unwrap();
        let hist = MomentHistory::new(&model, &sched, &ctx, 30, MomentMode::Local).unwrap();
        for set in hist.sets() {
            assert!(is_psd(&set.b, 1e-10));
            for l in &set.l {
                assert!(is_psd(l, 1e-10));
            }
        }
    }

    #[test]
    fn zero_sigma_attack_is_bitwise_clean() {
        let (model, sched) = setup(Topology::five_node());
        let clean = MomentHistory::new(&model, &sched, &AttackContext::none(2), 15, MomentMode::Local).unwrap();
        let ctx = AttackContext::new(1, 2, DMatrix::zeros(2, 2)).unwrap();
        let att = MomentHistory::new(&model, &sched, &ctx, 15, MomentMode::Local).unwrap();
        assert_eq!(clean.sets(), att.sets());
    }

    #[test]
    fn attack_inflates_attacked_node_variance() {
        let (model, sched) = setup(Topology::five_node());
        let clean = MomentHistory::new(&model, &sched, &AttackContext::none(2), 15, MomentMode::Exact).unwrap();
        let ctx = AttackContext::new(1, 1, DMatrix::identity(2, 2) * 3.0).unwrap();
        let att = MomentHistory::new(&model, &sched, &ctx, 15, MomentMode::Exact).unwrap();
        for t in 1..=15 {
            assert!(psd_leq(&clean.at(t).l[1], &att.at(t).l[1], 1e-10));
            assert_ne!(clean.at(t).l[1], att.at(t).l[1]);
        }
        // neighbour feels it through fusion
        assert_ne!(clean.at(4).l[0], att.at(4).l[0]);
    }
}
