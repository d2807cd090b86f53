//! Exact moments from the covariance of the full stacked vector
//! `[x; x̂_1; ...; x̂_N]`.

use nalgebra::DMatrix;

use super::{joint_transition, AttackContext, MomentSet, RoundNoise, ViewMoments};
use crate::error::{Error, Result};
use crate::kcif::{FilterSchedule, NodeGains};
use crate::linalg::symmetrize;
use crate::model::SystemModel;

/// Moment set at `t = 0` carrying the full joint covariance.
pub fn initial(model: &SystemModel) -> MomentSet {
    let p = model.state_dim();
    let n = model.num_nodes();
    let mut v = DMatrix::zeros(p * (n + 1), p * (n + 1));
    v.view_mut((0, 0), (p, p)).copy_from(model.p0());
    let lag = DMatrix::zeros(v.nrows(), v.ncols());
    let r = model.sensors().iter().map(|s| s.r().clone()).collect();
    from_joint(model, 0, v, &lag, r)
}

/// Splits the full joint (and its lag-one cross-covariance) into a
/// [`MomentSet`].
pub fn from_joint(model: &SystemModel, t: usize, v: DMatrix<f64>, lag: &DMatrix<f64>, r: Vec<DMatrix<f64>>) -> MomentSet {
    let p = model.state_dim();
    let n = model.num_nodes();
    let topo = model.topology();
    let blk = |m: &DMatrix<f64>, a: usize, b: usize| m.view((a * p, b * p), (p, p)).into_owned();
    let views = (0..n)
        .map(|i| {
            let members = topo.closed_neighborhood(i);
            let idx: Vec<usize> = std::iter::once(0).chain(members.iter().map(|&m| m + 1)).collect();
            let k = idx.len();
            let mut joint = DMatrix::zeros(k * p, k * p);
            let mut view_lag = DMatrix::zeros(k * p, k * p);
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    joint.view_mut((a * p, b * p), (p, p)).copy_from(&blk(&v, ia, ib));
                    view_lag.view_mut((a * p, b * p), (p, p)).copy_from(&blk(lag, ia, ib));
                }
            }
            ViewMoments {
                members,
                joint,
                lag: view_lag,
            }
        })
        .collect();
    MomentSet {
        t,
        p,
        b: blk(&v, 0, 0),
        l: (0..n).map(|i| blk(&v, i + 1, i + 1)).collect(),
        h: (0..n).map(|i| blk(&v, i + 1, 0)).collect(),
        views,
        j: (0..n)
            .map(|i| topo.neighbors(i).iter().map(|&j| blk(lag, i + 1, j + 1)).collect())
            .collect(),
        own_lag: (0..n).map(|i| blk(lag, i + 1, i + 1)).collect(),
        r,
        global: Some(v),
    }
}

/// Exact moments for `from.t + 1 ..= end`.
pub fn propagate_from(
    from: &MomentSet,
    end: usize,
    model: &SystemModel,
    schedule: &FilterSchedule,
    ctx: &AttackContext,
) -> Result<Vec<MomentSet>> {
    let mut v = from
        .global
        .clone()
        .ok_or_else(|| Error::InvalidParameter("exact propagation needs a full joint covariance".into()))?;
    let n = model.num_nodes();
    let members: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for t in (from.t + 1)..=end {
        if t > schedule.horizon() {
            return Err(Error::InvalidParameter(format!("round {t} beyond schedule horizon")));
        }
        let gains: Vec<NodeGains> = (0..n).map(|i| schedule.at(t, i).clone()).collect();
        let noise = RoundNoise::new(model, schedule, ctx, t);
        let (phi, w) = joint_transition(model, &gains, &noise, &members);
        let lag = &phi * &v;
        v = &lag * phi.transpose() + w;
        symmetrize(&mut v);
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("exact moments at t = {t}")));
        }
        out.push(from_joint(model, t, v.clone(), &lag, noise.r));
    }
    Ok(out)
}
