//! Conditional laws of the quantities a node observes.
//!
//! Node `i` scores three kinds of factor at round `t`:
//!
//! * own: `x̂_i(t)` given `[x̂_i(t−1); x̂_{N_i}(t−1); y_i(t)]`
//! * neighbour `j`: `x̂_j(t−1)` given `[x̂_j(t−2); x̂_i(t−1); y_i(t)]`, with
//!   `j`'s neighbours other than `i` ignored
//! * observation: `y_i(t)` given `[x̂_i(t−1); x̂_{N_i}(t−2); y_i(t−1)]`
//!
//! Estimates at time 0 are the constant zero and are left out of the
//! conditioning vector; a factor whose target is such an estimate does not
//! exist. All quantities are zero-mean, so each law is a regression gain and
//! a residual covariance.

use nalgebra::{DMatrix, DVector};

use super::{propagate_from, AttackContext, MomentHistory, MomentMode, MomentPath};
use crate::error::Result;
use crate::gaussian::{ConditionalGaussian, ConditionalLaw};
use crate::kcif::FilterSchedule;
use crate::model::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Own,
    Neighbor(usize),
    Observation,
}

/// An entry of a conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Estimate { node: usize, time: usize },
    Observation { node: usize, time: usize },
}

/// Target and conditioning entries of one factor, in the order used by the
/// laws below.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorLayout {
    pub target: Item,
    pub cond: Vec<Item>,
}

pub fn layout(model: &SystemModel, kind: FactorKind, i: usize, t: usize) -> Option<FactorLayout> {
    use Item::*;
    let nbrs = model.topology().neighbors(i);
    match kind {
        FactorKind::Own => {
            if t == 0 {
                return None;
            }
            let mut cond = Vec::new();
            if t >= 2 {
                cond.push(Estimate { node: i, time: t - 1 });
                cond.extend(nbrs.iter().map(|&j| Estimate { node: j, time: t - 1 }));
            }
            cond.push(Observation { node: i, time: t });
            Some(FactorLayout {
                target: Estimate { node: i, time: t },
                cond,
            })
        }
        FactorKind::Neighbor(j) => {
            if t < 2 {
                return None;
            }
            let mut cond = Vec::new();
            if t >= 3 {
                cond.push(Estimate { node: j, time: t - 2 });
            }
            cond.push(Estimate { node: i, time: t - 1 });
            cond.push(Observation { node: i, time: t });
            Some(FactorLayout {
                target: Estimate { node: j, time: t - 1 },
                cond,
            })
        }
        FactorKind::Observation => {
            if t == 0 {
                return None;
            }
            let mut cond = Vec::new();
            if t >= 2 {
                cond.push(Estimate { node: i, time: t - 1 });
            }
            if t >= 3 {
                cond.extend(nbrs.iter().map(|&j| Estimate { node: j, time: t - 2 }));
            }
            if t >= 2 {
                cond.push(Observation { node: i, time: t - 1 });
            }
            Some(FactorLayout {
                target: Observation { node: i, time: t },
                cond,
            })
        }
    }
}

/// Flattens the realised values of a layout. `estimates[t][i] = x̂_i(t)`,
/// `observations[t−1][i] = y_i(t)`.
pub fn gather(
    layout: &FactorLayout,
    estimates: &[Vec<DVector<f64>>],
    observations: &[Vec<DVector<f64>>],
    target: &mut Vec<f64>,
    cond: &mut Vec<f64>,
) {
    let value = |item: &Item| -> &DVector<f64> {
        match *item {
            Item::Estimate { node, time } => &estimates[time][node],
            Item::Observation { node, time } => &observations[time - 1][node],
        }
    };
    target.clear();
    target.extend(value(&layout.target).iter());
    cond.clear();
    for item in &layout.cond {
        cond.extend(value(item).iter());
    }
}

/// Second moments of a factor's target and conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBlocks {
    pub xx: DMatrix<f64>,
    pub xr: DMatrix<f64>,
    pub rr: DMatrix<f64>,
}

impl JointBlocks {
    pub fn law(&self) -> Result<ConditionalLaw> {
        ConditionalLaw::new(&self.xx, &self.xr, &self.rr)
    }
}

/// Builds the joint from the target variance, the target/conditioning cross
/// blocks and the upper triangle of the conditioning blocks.
fn assemble(
    target_var: DMatrix<f64>,
    cross: Vec<DMatrix<f64>>,
    pair: impl Fn(usize, usize) -> DMatrix<f64>,
) -> JointBlocks {
    let d = target_var.nrows();
    let dims: Vec<usize> = cross.iter().map(|c| c.ncols()).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &k| {
            let o = *acc;
            *acc += k;
            Some(o)
        })
        .collect();
    let total: usize = dims.iter().sum();
    let mut cov_xr = DMatrix::zeros(d, total);
    let mut cov_rr = DMatrix::zeros(total, total);
    for (k, c) in cross.iter().enumerate() {
        cov_xr.view_mut((0, offsets[k]), (d, dims[k])).copy_from(c);
        for l in k..cross.len() {
            let blk = pair(k, l);
            cov_rr.view_mut((offsets[k], offsets[l]), (dims[k], dims[l])).copy_from(&blk);
            if l != k {
                cov_rr
                    .view_mut((offsets[l], offsets[k]), (dims[l], dims[k]))
                    .copy_from(&blk.transpose());
            }
        }
    }
    JointBlocks {
        xx: target_var,
        xr: cov_xr,
        rr: cov_rr,
    }
}

/// Joint of `x̂_i(t)` and `[x̂_i(t−1); x̂_{N_i}(t−1); y_i(t)]`.
pub fn own_blocks(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
) -> Result<Option<JointBlocks>> {
    if t == 0 {
        return Ok(None);
    }
    let a = model.a();
    let c = model.sensor(i).c();
    let cur = path.at(t);
    let prev = path.at(t - 1);
    let g = schedule.at(t, i);
    let k = &schedule.weights(i).ct_rinv;
    let mut members = vec![i];
    members.extend_from_slice(model.topology().neighbors(i));
    let est = t >= 2;

    let y_cross = &cur.h[i] * c.transpose() + &g.m * k * &cur.r[i];
    let y_var = c * &cur.b * c.transpose() + &cur.r[i];
    let ac = a.transpose() * c.transpose();

    let mut cross = Vec::new();
    if est {
        for &a in &members {
            cross.push(cur.view_lag(i, i, a).expect("member lag"));
        }
    }
    cross.push(y_cross);
    let ny = cross.len() - 1;
    let blocks = assemble(cur.l[i].clone(), cross, |u, v| {
        if u == ny && v == ny {
            y_var.clone()
        } else if v == ny {
            prev.view_h(i, members[u]).expect("member") * &ac
        } else {
            prev.view_t(i, members[u], members[v]).expect("members")
        }
    });
    Ok(Some(blocks))
}

/// Joint of `x̂_j(t−1)` and `[x̂_j(t−2); x̂_i(t−1); y_i(t)]`, `j ∈ N_i`.
pub fn neighbor_blocks(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    j: usize,
    t: usize,
) -> Result<Option<JointBlocks>> {
    let _ = schedule;
    if t < 2 {
        return Ok(None);
    }
    let a = model.a();
    let c = model.sensor(i).c();
    let cur = path.at(t);
    let m1 = path.at(t - 1);
    let ac = a.transpose() * c.transpose();
    let y_var = c * &cur.b * c.transpose() + &cur.r[i];
    let mut cross = Vec::new();
    let has_prev = t >= 3;
    if has_prev {
        cross.push(m1.view_lag(i, j, j).expect("member lag"));
    }
    cross.push(m1.view_t(i, j, i).expect("members"));
    cross.push(m1.view_h(i, j).expect("member") * &ac);
    let off = usize::from(has_prev);
    let m2 = if has_prev { Some(path.at(t - 2)) } else { None };
    let blocks = assemble(m1.view_t(i, j, j).expect("member"), cross, |u, v| match (u + 1 - off, v + 1 - off) {
        (0, 0) => m2.expect("t ≥ 3").view_t(i, j, j).expect("member"),
        (0, 1) => m1.view_lag(i, i, j).expect("member lag").transpose(),
        (0, 2) => m2.expect("t ≥ 3").view_h(i, j).expect("member") * a.transpose() * &ac,
        (1, 1) => m1.l[i].clone(),
        (1, 2) => &m1.h[i] * &ac,
        (2, 2) => y_var.clone(),
        _ => unreachable!("upper triangle only"),
    });
    Ok(Some(blocks))
}

/// Joint of `y_i(t)` and `[x̂_i(t−1); x̂_{N_i}(t−2); y_i(t−1)]`.
pub fn observation_blocks(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
) -> Result<Option<JointBlocks>> {
    if t == 0 {
        return Ok(None);
    }
    let a = model.a();
    let c = model.sensor(i).c();
    let cur = path.at(t);
    let target_var = c * &cur.b * c.transpose() + &cur.r[i];
    if t == 1 {
        return Ok(Some(JointBlocks {
            xr: DMatrix::zeros(c.nrows(), 0),
            rr: DMatrix::zeros(0, 0),
            xx: target_var,
        }));
    }
    let m1 = path.at(t - 1);
    let nbrs = model.topology().neighbors(i);
    let with_nbrs = t >= 3;
    let ca = c * a;
    let ct = c.transpose();
    let ac = a.transpose() * &ct;

    #[derive(Clone, Copy)]
    enum Slot {
        Own,
        Nbr(usize),
        Y,
    }
    let mut slots = vec![Slot::Own];
    if with_nbrs {
        slots.extend(nbrs.iter().map(|&j| Slot::Nbr(j)));
    }
    slots.push(Slot::Y);

    let m2 = if with_nbrs { Some(path.at(t - 2)) } else { None };
    let cross: Vec<DMatrix<f64>> = slots
        .iter()
        .map(|s| match *s {
            Slot::Own => &ca * m1.h[i].transpose(),
            Slot::Nbr(j) => &ca * a * m2.expect("t ≥ 3").view_h(i, j).expect("member").transpose(),
            Slot::Y => &ca * &m1.b * &ct,
        })
        .collect();
    let g1 = schedule.at(t - 1, i);
    let k = &schedule.weights(i).ct_rinv;
    let blocks = assemble(target_var, cross, |u, v| match (slots[u], slots[v]) {
        (Slot::Own, Slot::Own) => m1.l[i].clone(),
        (Slot::Own, Slot::Nbr(j)) => m1.view_lag(i, i, j).expect("member lag"),
        (Slot::Own, Slot::Y) => &m1.h[i] * &ct + &g1.m * k * &m1.r[i],
        (Slot::Nbr(j), Slot::Nbr(l)) => m2.expect("t ≥ 3").view_t(i, j, l).expect("members"),
        (Slot::Nbr(j), Slot::Y) => m2.expect("t ≥ 3").view_h(i, j).expect("member") * &ac,
        (Slot::Y, Slot::Y) => c * &m1.b * &ct + &m1.r[i],
        _ => unreachable!("upper triangle only"),
    });
    Ok(Some(blocks))
}

/// Joint second moments of any factor kind.
pub fn factor_blocks(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    kind: FactorKind,
    i: usize,
    t: usize,
) -> Result<Option<JointBlocks>> {
    match kind {
        FactorKind::Own => own_blocks(path, model, schedule, i, t),
        FactorKind::Neighbor(j) => neighbor_blocks(path, model, schedule, i, j, t),
        FactorKind::Observation => observation_blocks(path, model, schedule, i, t),
    }
}

/// Law of any factor kind.
pub fn factor_law(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    kind: FactorKind,
    i: usize,
    t: usize,
) -> Result<Option<ConditionalLaw>> {
    factor_blocks(path, model, schedule, kind, i, t)?
        .map(|b| b.law())
        .transpose()
}

/// Law of `x̂_i(t)` given `[x̂_i(t−1); x̂_{N_i}(t−1); y_i(t)]`.
pub fn own_law(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
) -> Result<Option<ConditionalLaw>> {
    factor_law(path, model, schedule, FactorKind::Own, i, t)
}

/// Law of `x̂_j(t−1)` given `[x̂_j(t−2); x̂_i(t−1); y_i(t)]` for `j ∈ N_i`.
pub fn neighbor_law(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    j: usize,
    t: usize,
) -> Result<Option<ConditionalLaw>> {
    factor_law(path, model, schedule, FactorKind::Neighbor(j), i, t)
}

/// Law of `y_i(t)` given `[x̂_i(t−1); x̂_{N_i}(t−2); y_i(t−1)]`.
pub fn observation_law(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
) -> Result<Option<ConditionalLaw>> {
    factor_law(path, model, schedule, FactorKind::Observation, i, t)
}

fn condition(law: Option<ConditionalLaw>, r: &DVector<f64>, what: &str) -> Result<ConditionalGaussian> {
    law.ok_or_else(|| crate::Error::InvalidParameter(format!("{what} law undefined at this time")))?
        .condition(r)
}

/// `N(μ̂_i(t), P̂_i(t))` for the realised conditioning vector `r`.
pub fn cond_dist_own_estimate(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
    r: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    condition(own_law(path, model, schedule, i, t)?, r, "own-estimate")
}

pub fn cond_dist_neighbor_estimate(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    j: usize,
    t: usize,
    r: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    condition(neighbor_law(path, model, schedule, i, j, t)?, r, "neighbour-estimate")
}

pub fn cond_dist_observation(
    path: &MomentPath<'_>,
    model: &SystemModel,
    schedule: &FilterSchedule,
    i: usize,
    t: usize,
    r: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    condition(observation_law(path, model, schedule, i, t)?, r, "observation")
}

/// All laws node `i` uses at round `t` under one attack hypothesis.
#[derive(Debug, Clone)]
pub struct AttackedLaws {
    pub own: Option<ConditionalLaw>,
    pub neighbors: Vec<(usize, Option<ConditionalLaw>)>,
    pub observation: Option<ConditionalLaw>,
}

/// Laws at node `i`, round `t`, when `ctx` describes the attack: moments
/// are recomputed from the onset on with the attacked sensor's noise
/// inflated, and the clean history is used before it.
pub fn post_attack_variants(
    clean: &MomentHistory,
    model: &SystemModel,
    schedule: &FilterSchedule,
    ctx: &AttackContext,
    mode: MomentMode,
    i: usize,
    t: usize,
) -> Result<AttackedLaws> {
    let branch;
    let path = match ctx.onset() {
        Some(m) if m <= t => {
            branch = propagate_from(clean.at(m - 1), t, model, schedule, ctx, mode)?;
            MomentPath::branched(clean.sets(), &branch, m)
        }
        _ => clean.path(),
    };
    let neighbors = model
        .topology()
        .neighbors(i)
        .iter()
        .map(|&j| Ok((j, neighbor_law(&path, model, schedule, i, j, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackedLaws {
        own: own_law(&path, model, schedule, i, t)?,
        neighbors,
        observation: observation_law(&path, model, schedule, i, t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcif::GainMode;
    use crate::linalg::psd_leq;
    use crate::model::Topology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SystemModel, FilterSchedule, MomentHistory) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = SystemModel::random(&mut rng, 2, 2, Topology::five_node(), 0.95).unwrap();
        let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), 12).unwrap();
        let hist = MomentHistory::new(&model, &sched, &AttackContext::none(2), 12, MomentMode::Local).unwrap();
        (model, sched, hist)
    }

    #[test]
    fn layouts_match_law_dimensions() {
        let (model, sched, hist) = setup();
        let path = hist.path();
        for t in 1..=6 {
            for i in 0..5 {
                let mut kinds = vec![FactorKind::Own, FactorKind::Observation];
                kinds.extend(model.topology().neighbors(i).iter().map(|&j| FactorKind::Neighbor(j)));
                for kind in kinds {
                    let lay = layout(&model, kind, i, t);
                    let law = factor_law(&path, &model, &sched, kind, i, t).unwrap();
                    assert_eq!(lay.is_some(), law.is_some(), "{kind:?} t={t}");
                    if let (Some(lay), Some(law)) = (lay, law) {
                        assert_eq!(law.cond_dim(), lay.cond.len() * 2, "{kind:?} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn conditioning_shrinks_variance() {
        let (model, sched, hist) = setup();
        let path = hist.path();
        let law = own_law(&path, &model, &sched, 0, 5).unwrap().unwrap();
        assert!(psd_leq(&law.cov, &hist.at(5).l[0], 1e-10));
        let g = law.condition(&DVector::from_element(law.cond_dim(), 0.3)).unwrap();
        assert!(g.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn observation_variant_grows_under_attack() {
        let (model, sched, hist) = setup();
        let ctx = AttackContext::new(0, 2, DMatrix::identity(2, 2) * 3.0).unwrap();
        let att = post_attack_variants(&hist, &model, &sched, &ctx, MomentMode::Local, 0, 6).unwrap();
        let clean = observation_law(&hist.path(), &model, &sched, 0, 6).unwrap().unwrap();
        assert!(psd_leq(&clean.cov, &att.observation.unwrap().cov, 1e-10));
    }

    #[test]
    fn future_onset_gives_clean_laws() {
        let (model, sched, hist) = setup();
        let ctx = AttackContext::new(1, 9, DMatrix::identity(2, 2) * 3.0).unwrap();
        let att = post_attack_variants(&hist, &model, &sched, &ctx, MomentMode::Local, 0, 6).unwrap();
        let clean = own_law(&hist.path(), &model, &sched, 0, 6).unwrap().unwrap();
        assert_eq!(att.own.unwrap().cov, clean.cov);
    }
}
