//! Independent oracles for the filter, the moment recursion, the
//! conditional laws and the detector statistics.
//!
//! Each check recomputes a quantity by a different route (sampling, a
//! textbook filter, an explicitly assembled joint covariance, batch
//! products, brute-force sums) and reports the worst discrepancy.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bayes::{update_lambda, BayesDetectorState, BayesEvaluator};
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_log_pdf, ConditionalLaw};
use crate::harness::{par_map, DetectorSelection, Experiment, ExperimentConfig, Stream};
use crate::kcif::{run_filters, FilterNetwork, FilterSchedule, GainMode};
use crate::linalg::frobenius_rel_err;
use crate::model::{AttackModel, Onset, SensorModel, SystemModel, Topology};
use crate::moments::conditional::{factor_blocks, factor_law, layout, FactorKind, FactorLayout, Item};
use crate::moments::{propagate_from, AttackContext, MomentHistory, MomentMode, MomentPath};
use crate::nonbayes::{innovation, InnovationTables};
use crate::sim::{generate_trajectory, GaussianNoise};
use crate::tables::{LawTables, TrialData};

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub passed: bool,
    /// Worst observed discrepancy.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Report {
    fn new(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: value.is_finite() && value <= tolerance,
            value,
            tolerance,
            detail,
        }
    }

    fn failed(name: &str, err: &Error) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {err}"),
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {:.3e} (tolerance {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

fn report(name: &str, r: Result<Report>) -> Report {
    log::debug!("finished {name}");
    match r {
        Ok(mut rep) => {
            rep.name = name.to_string();
            rep
        }
        Err(e) => Report::failed(name, &e),
    }
}

fn small_model(p: usize, q: usize, topo: Topology, seed: u64) -> Result<SystemModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SystemModel::random(&mut rng, p, q, topo, 0.95)
}

/// Runs every suite at the given Monte Carlo size.
pub fn run_all(mc_trials: usize, seed: u64) -> Vec<Report> {
    let mut out = Vec::new();
    for p in [1, 2] {
        out.push(report("moment recursion vs Monte Carlo", moment_monte_carlo(p, mc_trials, 10, seed, None)));
    }
    out.push(report(
        "attacked moment recursion vs Monte Carlo",
        moment_monte_carlo(2, mc_trials, 10, seed + 1, Some((1, 4))),
    ));
    out.push(report("isolated KCIF vs textbook Kalman filter", kcif_vs_kalman(50, seed)));
    out.push(report("lambda recursion vs batch products", lambda_batch(seed)));
    for (label, topo, mode) in [
        ("line graph, exact moments", Topology::line(3), MomentMode::Exact),
        ("five-node graph, exact moments", Topology::five_node(), MomentMode::Exact),
        ("five-node graph, local moments", Topology::five_node(), MomentMode::Local),
    ] {
        out.push(report(&format!("conditional laws vs Schur complement ({label})"), conditioning_oracle(topo, mode, seed)));
    }
    out.push(report("window statistics vs brute force", statistic_equivalence(seed)));
    out.push(report("chi-square mean under no attack", chi2_mean(10_000, seed)));
    out
}

// ---------------------------------------------------------------------------
// Monte Carlo moments

/// Sample second moments of `x(t)` and `x̂_i(t)` over `trials` paths on a
/// complete 3-node graph, against the recursion for `t ≤ horizon`.
/// Returns the worst relative Frobenius error over `B`, `L_i`, `H_i` and
/// `T_{i,j}`. `attack` is `(sensor, onset)` with `Σ = 3I`.
pub fn moment_monte_carlo(p: usize, trials: usize, horizon: usize, seed: u64, attack: Option<(usize, usize)>) -> Result<Report> {
    let n = 3;
    let model = small_model(p, p, Topology::complete(n), seed)?;
    let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), horizon)?;
    let sigma = DMatrix::identity(p, p) * 3.0;
    let (attack_model, ctx) = match attack {
        Some((l, m)) => (AttackModel::new(l, Onset::At(m), sigma.clone())?, AttackContext::new(l, m, sigma)?),
        None => (AttackModel::none(p), AttackContext::none(p)),
    };
    let hist = MomentHistory::new(&model, &sched, &ctx, horizon, MomentMode::Local)?;

    // sums[t-1][a][b] = Σ z_a z_b' with z_0 = x and z_{1+i} = x̂_i
    let chunks = 16.min(trials.max(1));
    let partial = par_map(chunks, |c| {
        let lo = trials * c / chunks;
        let hi = trials * (c + 1) / chunks;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        let mut sums = vec![vec![vec![DMatrix::<f64>::zeros(p, p); n + 1]; n + 1]; horizon];
        for _ in lo..hi {
            let traj = generate_trajectory(&model, &attack_model, horizon, &mut rng)?;
            let est = run_filters(&model, &sched, &traj.observations)?;
            for t in 1..=horizon {
                let z: Vec<&DVector<f64>> = std::iter::once(traj.state(t)).chain(est[t].iter()).collect();
                for a in 0..=n {
                    for b in 0..=n {
                        sums[t - 1][a][b] += z[a] * z[b].transpose();
                    }
                }
            }
        }
        Ok(sums)
    })?;
    let mut worst = (0.0f64, String::new());
    for t in 1..=horizon {
        let mean = |a: usize, b: usize| {
            partial.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + &s[t - 1][a][b]) / trials as f64
        };
        let set = hist.at(t);
        let mut check = |label: String, est: DMatrix<f64>, rec: &DMatrix<f64>| {
            let e = frobenius_rel_err(&est, rec);
            if e > worst.0 {
                worst = (e, label);
            }
        };
        check(format!("B({t})"), mean(0, 0), &set.b);
        for i in 0..n {
            check(format!("L_{}({t})", i + 1), mean(1 + i, 1 + i), &set.l[i]);
            check(format!("H_{}({t})", i + 1), mean(1 + i, 0), &set.h[i]);
            for j in 0..n {
                if j != i {
                    check(format!("T_{}{}({t})", i + 1, j + 1), mean(1 + i, 1 + j), &set.t(i, i, j));
                }
            }
        }
    }
    Ok(Report::new(
        "moments",
        worst.0,
        0.05,
        format!("p = q = {p}, {trials} paths, worst at {}", worst.1),
    ))
}

// ---------------------------------------------------------------------------
// Textbook Kalman filter

/// Covariance-form Kalman filter: predict, gain, update.
pub struct TextbookKalman {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    c: DMatrix<f64>,
    r: DMatrix<f64>,
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl TextbookKalman {
    pub fn new(model: &SystemModel, sensor: &SensorModel) -> Self {
        Self {
            a: model.a().clone(),
            q: model.q().clone(),
            c: sensor.c().clone(),
            r: sensor.r().clone(),
            x: DVector::zeros(model.state_dim()),
            p: model.p0().clone(),
        }
    }

    pub fn step(&mut self, y: &DVector<f64>) -> Result<()> {
        let x_pred = &self.a * &self.x;
        let p_pred = &self.a * &self.p * self.a.transpose() + &self.q;
        let s = &self.c * &p_pred * self.c.transpose() + &self.r;
        let s_inv = s.try_inverse().ok_or_else(|| Error::Singular("innovation covariance".into()))?;
        let k = &p_pred * self.c.transpose() * s_inv;
        self.x = &x_pred + &k * (y - &self.c * &x_pred);
        let eye = DMatrix::identity(self.p.nrows(), self.p.ncols());
        self.p = (eye - &k * &self.c) * p_pred;
        Ok(())
    }
}

/// A single isolated node runs the KCIF with no neighbours; it must
/// coincide with the textbook filter.
pub fn kcif_vs_kalman(steps: usize, seed: u64) -> Result<Report> {
    let model = small_model(2, 2, Topology::from_edges(1, &[])?, seed + 17)?;
    let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = generate_trajectory(&model, &AttackModel::none(2), steps, &mut rng)?;
    let mut net = FilterNetwork::new(&model, &sched);
    let mut kf = TextbookKalman::new(&model, model.sensor(0));
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let xhat = net.step(&traj.observations[t - 1])?[0].clone();
        kf.step(traj.observation(t, 0))?;
        let ex = (&xhat - &kf.x).norm() / kf.x.norm().max(1e-300);
        let ep = frobenius_rel_err(&sched.at(t, 0).m, &kf.p);
        worst = worst.max(ex).max(ep);
    }
    Ok(Report::new("kcif", worst, 1e-8, format!("{steps} steps, estimate and covariance")))
}

// ---------------------------------------------------------------------------
// Batch λ

fn law_log_pdf(path: &MomentPath<'_>, model: &SystemModel, sched: &FilterSchedule, kind: FactorKind, i: usize, t: usize, est: &[Vec<DVector<f64>>], obs: &[Vec<DVector<f64>>]) -> Result<f64> {
    let (Some(law), Some(lay)) = (factor_law(path, model, sched, kind, i, t)?, layout(model, kind, i, t)) else {
        return Ok(0.0);
    };
    let fetch = |item: &Item| match *item {
        Item::Estimate { node, time } => est[time][node].clone(),
        Item::Observation { node, time } => obs[time - 1][node].clone(),
    };
    let target = fetch(&lay.target);
    let cond: Vec<f64> = lay.cond.iter().flat_map(|it| fetch(it).iter().copied().collect::<Vec<_>>()).collect();
    let g = law.condition(&DVector::from_vec(cond))?;
    gaussian_log_pdf(&target, &g.mean, &g.cov)
}

fn factor_kinds(model: &SystemModel, i: usize) -> Vec<FactorKind> {
    let mut k = vec![FactorKind::Own];
    k.extend(model.topology().neighbors(i).iter().map(|&j| FactorKind::Neighbor(j)));
    k.push(FactorKind::Observation);
    k
}

/// `λ_i^l(t)` from its definition as a ratio of joint densities, with the
/// post-change density of each factor the prior-weighted mixture over
/// retained onsets, against the recursive update. `N = 2`, `p = q = 1`,
/// horizon 5, onset window 3.
pub fn lambda_batch(seed: u64) -> Result<Report> {
    let (horizon, window, rho) = (5usize, 3usize, 0.05);
    let model = small_model(1, 1, Topology::line(2), seed + 3)?;
    let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), horizon)?;
    let sigma = DMatrix::from_element(1, 1, 3.0);
    let tables = LawTables::build(&model, &sched, &[(sigma.clone(), true)], horizon, window, MomentMode::Local)?;
    let clean = MomentHistory::new(&model, &sched, &AttackContext::none(1), horizon, MomentMode::Local)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let attack = AttackModel::new(1, Onset::At(3), sigma.clone())?;
    let traj = generate_trajectory(&model, &attack, horizon, &mut rng)?;
    let est = run_filters(&model, &sched, &traj.observations)?;
    let data = TrialData::new(&model, &est, &traj.observations, true);
    let obs = &traj.observations;

    // branches[l][m-1] = attacked moments from onset m
    let mut branches = Vec::new();
    for l in 0..2 {
        let mut per_m = Vec::new();
        for m in 1..=horizon {
            let ctx = AttackContext::new(l, m, sigma.clone())?;
            per_m.push(propagate_from(clean.at(m - 1), horizon, &model, &sched, &ctx, MomentMode::Local)?);
        }
        branches.push(per_m);
    }
    let clean_path = clean.path();

    let mut worst = 0.0f64;
    for i in 0..2 {
        let hyps = vec![0, 1];
        let mut eval = BayesEvaluator::new(rho, window, 0, horizon)?;
        let mut state = BayesDetectorState::new(hyps.clone(), rho, 1.0)?;
        let mut ratios = Vec::new();
        // f_pre(s) and f_post,l(s) in the linear domain
        let mut pre = Vec::new();
        let mut post = vec![Vec::new(); 2];
        for t in 1..=horizon {
            eval.log_ratios(&tables, data.at(t, i), i, t, &hyps, &mut ratios);
            state = update_lambda(&state, &ratios)?;

            let kinds = factor_kinds(&model, i);
            let mut f_pre = 1.0;
            for &k in &kinds {
                f_pre *= law_log_pdf(&clean_path, &model, &sched, k, i, t, &est, obs)?.exp();
            }
            pre.push(f_pre);
            // retained onsets and their prior weights given τ ≤ t
            let first = if t > window { t - window + 1 } else { 1 };
            let cdf = |k: usize| 1.0 - (1.0 - rho).powi(k as i32);
            for (l, post_l) in post.iter_mut().enumerate() {
                let mut f_post = 1.0;
                for &k in &kinds {
                    let mut mix = 0.0;
                    for m in first..=t {
                        let w = if m == first { cdf(first) } else { rho * (1.0 - rho).powi(m as i32 - 1) } / cdf(t);
                        let path = MomentPath::branched(clean.sets(), &branches[l][m - 1], m);
                        mix += w * law_log_pdf(&path, &model, &sched, k, i, t, &est, obs)?.exp();
                    }
                    f_post *= mix;
                }
                post_l.push(f_post);
            }
            for (k, &l) in hyps.iter().enumerate() {
                // numerator Σ_k P(τ = k)·Π_{s<k} f_pre(s)·Π_{s=k..t} f_post(s)
                let mut num = 0.0;
                for onset in 1..=t {
                    let prior = rho * (1.0 - rho).powi(onset as i32 - 1);
                    let before: f64 = pre[..onset - 1].iter().product();
                    let after: f64 = post[l][onset - 1..t].iter().product();
                    num += prior * before * after;
                }
                let den = (1.0 - rho).powi(t as i32) * pre[..t].iter().product::<f64>();
                let batch = num / den;
                let rec = state.log_lambda[k].exp();
                worst = worst.max((rec - batch).abs() / batch.abs().max(1e-300));
            }
        }
    }
    Ok(Report::new("lambda", worst, 1e-8, "N = 2, p = q = 1, horizon 5, all t, i, l".into()))
}

// ---------------------------------------------------------------------------
// Explicit joint and Schur-complement conditioning

/// Coefficients of every process, estimate and observation variable on the
/// primitive noises `[x(0); w(1); v_1(1); ...; v_N(1); w(2); ...]`.
pub struct LinearJoint {
    /// `x[t]`, `t = 0..=T`.
    pub x: Vec<DMatrix<f64>>,
    /// `xhat[t][i]`, `t = 0..=T`.
    pub xhat: Vec<Vec<DMatrix<f64>>>,
    /// `y[t-1][i]`, `t = 1..=T`.
    pub y: Vec<Vec<DMatrix<f64>>>,
    pub noise_cov: DMatrix<f64>,
}

impl LinearJoint {
    pub fn new(model: &SystemModel, sched: &FilterSchedule, attack: &AttackModel, horizon: usize) -> Self {
        let (p, q, n) = (model.state_dim(), model.obs_dim(), model.num_nodes());
        let block = p + n * q;
        let dim = p + horizon * block;
        let mut noise_cov = DMatrix::zeros(dim, dim);
        noise_cov.view_mut((0, 0), (p, p)).copy_from(model.p0());
        let a = model.a();
        let mut x = vec![DMatrix::zeros(p, dim)];
        x[0].view_mut((0, 0), (p, p)).fill_with_identity();
        let mut xhat = vec![vec![DMatrix::zeros(p, dim); n]];
        let mut y = Vec::new();
        for t in 1..=horizon {
            let off = p + (t - 1) * block;
            noise_cov.view_mut((off, off), (p, p)).copy_from(model.q());
            let mut xt = a * &x[t - 1];
            xt.view_mut((0, off), (p, p)).fill_with_identity();
            let mut yt = Vec::new();
            for i in 0..n {
                let vo = off + p + i * q;
                let mut r = model.sensor(i).r().clone();
                if attack.active(i, t) {
                    r += attack.sigma();
                }
                noise_cov.view_mut((vo, vo), (q, q)).copy_from(&r);
                let mut yi = model.sensor(i).c() * &xt;
                yi.view_mut((0, vo), (q, q)).fill_with_identity();
                yt.push(yi);
            }
            let prev = &xhat[t - 1];
            let topo = model.topology();
            let next: Vec<DMatrix<f64>> = (0..n)
                .map(|i| {
                    let g = sched.at(t, i);
                    let pred = a * &prev[i];
                    let mut phi = DMatrix::zeros(p, dim);
                    for j in topo.closed_neighborhood(i) {
                        phi += &sched.weights(j).ct_rinv * &yt[j];
                    }
                    let mut cons = DMatrix::zeros(p, dim);
                    for &j in topo.neighbors(i) {
                        cons += &prev[j] - &prev[i];
                    }
                    &pred + &g.m * (phi - &g.s * &pred) + (&g.p * a) * cons * g.gamma
                })
                .collect();
            x.push(xt);
            xhat.push(next);
            y.push(yt);
        }
        Self { x, xhat, y, noise_cov }
    }

    fn coef(&self, item: &Item) -> &DMatrix<f64> {
        match *item {
            Item::Estimate { node, time } => &self.xhat[time][node],
            Item::Observation { node, time } => &self.y[time - 1][node],
        }
    }

    pub fn cov(&self, a: &[Item], b: &[Item]) -> DMatrix<f64> {
        let stack = |items: &[Item]| {
            let rows: usize = items.iter().map(|it| self.coef(it).nrows()).sum();
            let mut m = DMatrix::zeros(rows, self.noise_cov.ncols());
            let mut r = 0;
            for it in items {
                let c = self.coef(it);
                m.view_mut((r, 0), (c.nrows(), c.ncols())).copy_from(c);
                r += c.nrows();
            }
            m
        };
        let ca = stack(a);
        let cb = stack(b);
        &ca * &self.noise_cov * cb.transpose()
    }
}

/// Generic conditioning by an LU solve: `(Σ_xr Σ_rr⁻¹, Σ_xx − Σ_xr Σ_rr⁻¹ Σ_rx)`.
pub fn schur_condition(cov_xx: &DMatrix<f64>, cov_xr: &DMatrix<f64>, cov_rr: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if cov_rr.nrows() == 0 {
        return Ok((DMatrix::zeros(cov_xx.nrows(), 0), cov_xx.clone()));
    }
    let gain_t = cov_rr
        .clone()
        .lu()
        .solve(&cov_xr.transpose())
        .ok_or_else(|| Error::Singular("conditioning covariance".into()))?;
    let gain = gain_t.transpose();
    let cov = cov_xx - &gain * cov_xr.transpose();
    Ok((gain, cov))
}

/// The joint covariance of `(x, r)` implied by a gain and a conditional
/// covariance: `[[cov + G·Σ_rr·G', G·Σ_rr], [Σ_rr·G', Σ_rr]]`.
fn implied_joint(gain: &DMatrix<f64>, cov: &DMatrix<f64>, cov_rr: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = (cov.nrows(), cov_rr.nrows());
    let xr = gain * cov_rr;
    let mut j = DMatrix::zeros(d + k, d + k);
    j.view_mut((0, 0), (d, d)).copy_from(&(cov + &xr * gain.transpose()));
    j.view_mut((0, d), (d, k)).copy_from(&xr);
    j.view_mut((d, 0), (k, d)).copy_from(&xr.transpose());
    j.view_mut((d, d), (k, k)).copy_from(cov_rr);
    j
}

/// Relative Frobenius distance between the joints implied by a law and by a
/// reference `(gain, cov)`. Measured on the joint so that the rounding
/// amplification of an ill-conditioned `Σ_rr` or of a near-degenerate
/// conditional covariance is not scored as a discrepancy.
fn law_error(law: &ConditionalLaw, gain: &DMatrix<f64>, cov: &DMatrix<f64>, cov_rr: &DMatrix<f64>) -> f64 {
    frobenius_rel_err(&implied_joint(&law.gain, &law.cov, cov_rr), &implied_joint(gain, cov, cov_rr))
}

#[derive(Default)]
struct Worst {
    value: f64,
    at: String,
}

impl Worst {
    fn update(&mut self, e: f64, at: impl FnOnce() -> String) {
        if e > self.value || e.is_nan() {
            self.value = e;
            self.at = at();
        }
    }
}

/// Every conditional law (clean and under an attack at each sensor from
/// round 3) against Schur-complement conditioning of explicitly assembled
/// joints. Each law is checked against the conditioning of its own joint
/// blocks. With exact moments the blocks are also checked against the joint
/// assembled from the primitive noises, and the law against its
/// conditioning. Singular joints, which are regularised by design, are
/// counted but not scored.
pub fn conditioning_oracle(topo: Topology, mode: MomentMode, seed: u64) -> Result<Report> {
    let horizon = 6;
    let model = small_model(2, 2, topo, seed + 5)?;
    let n = model.num_nodes();
    let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), horizon)?;
    let sigma = DMatrix::identity(2, 2) * 3.0;
    let mut scenarios = vec![(AttackModel::none(2), AttackContext::none(2))];
    for l in 0..n {
        scenarios.push((AttackModel::new(l, Onset::At(3), sigma.clone())?, AttackContext::new(l, 3, sigma.clone())?));
    }
    let mut worst = Worst::default();
    let mut laws = 0usize;
    let mut jittered = 0usize;
    for (attack, ctx) in &scenarios {
        let joint = LinearJoint::new(&model, &sched, attack, horizon);
        let hist = MomentHistory::new(&model, &sched, ctx, horizon, mode)?;
        let path = hist.path();
        for t in 1..=horizon {
            for i in 0..n {
                for kind in factor_kinds(&model, i) {
                    let (Some(blocks), Some(FactorLayout { target, cond })) = (factor_blocks(&path, &model, &sched, kind, i, t)?, layout(&model, kind, i, t)) else {
                        continue;
                    };
                    let at = || format!("{kind:?} at node {}, t = {t}, attack {:?}", i + 1, ctx.attacked().map(|l| l + 1));
                    let law = blocks.law()?;
                    if law.jitter.is_some() {
                        jittered += 1;
                        continue;
                    }
                    laws += 1;
                    let (gain, cov) = schur_condition(&blocks.xx, &blocks.xr, &blocks.rr)?;
                    worst.update(law_error(&law, &gain, &cov, &blocks.rr), at);
                    if mode != MomentMode::Exact {
                        continue;
                    }
                    let tgt = [target];
                    let (xx, xr, rr) = (joint.cov(&tgt, &tgt), joint.cov(&tgt, &cond), joint.cov(&cond, &cond));
                    let (gain, cov) = schur_condition(&xx, &xr, &rr)?;
                    let eb = frobenius_rel_err(&blocks.xx, &xx).max(frobenius_rel_err(&blocks.xr, &xr)).max(frobenius_rel_err(&blocks.rr, &rr));
                    worst.update(law_error(&law, &gain, &cov, &rr).max(eb), at);
                }
            }
        }
    }
    let mut detail = format!("{n} nodes, {mode:?} moments, {laws} laws");
    if !worst.at.is_empty() {
        detail.push_str(&format!(", worst {}", worst.at));
    }
    if jittered > 0 {
        detail.push_str(&format!(", {jittered} singular joints regularised and not scored"));
    }
    Ok(Report::new("conditioning", worst.value, 1e-10, detail))
}

// ---------------------------------------------------------------------------
// Window statistics

const VALIDATION_CONFIG: &str = r#"
seed = 3
trials = 1
horizon = 40

[model]
nodes = 3
edges = [[1, 2], [2, 3]]
state_dim = 2
obs_dim = 2

[model.random]
seed = 9
max_spectral_radius = 0.95

[attack]
sensor = 2
sigma = [[3.0, 0.0], [0.0, 3.0]]

[bayes]
rho = 0.05
onset_window = 5
initial_threshold = 0.5
alphas = [0.1]
include_self_hypothesis = true

[nonbayes]
arl_targets = [20.0]
window = 6
theta_scales = [0.75, 3.0, 12.0]
onset = 10
initial_threshold = 5.0
include_self_hypothesis = false
"#;

/// MSPRT and GLR traces from the harness against O(n²) sums of the
/// per-round log-likelihood ratios, on attacked and clean paths.
pub fn statistic_equivalence(seed: u64) -> Result<Report> {
    let mut cfg = ExperimentConfig::from_toml(VALIDATION_CONFIG)?;
    cfg.seed = seed;
    let exp = Experiment::new(cfg)?;
    let sel = DetectorSelection {
        bayes: false,
        msprt: true,
        glr: true,
        chi2: false,
    };
    let tw = exp.nonbayes_window;
    let mut worst = 0.0f64;
    for stream in [Stream::FixedOnset, Stream::NoAttackEvaluation] {
        for k in 0..3 {
            let traj = exp.trajectory(stream, k)?;
            let traces = exp.traces_for(&traj, k, &sel)?;
            let est = run_filters(&exp.model, &exp.schedule, &traj.observations)?;
            let data = TrialData::new(&exp.model, &est, &traj.observations, false);
            let horizon = traj.horizon();
            for i in 0..exp.num_nodes() {
                let hyps = exp.hypotheses(crate::harness::Detector::Msprt, i);
                let llr = |s: usize, t: usize, kk: usize, j: usize| {
                    let d = data.at(t, i);
                    exp.tables.attacked(s, j, kk, t, i).own_log_pdf(d).0 - exp.tables.clean(t, i).own_log_pdf(d).0
                };
                for n in 1..=horizon {
                    let lo = n.saturating_sub(tw).max(1);
                    let mut msprt = f64::NEG_INFINITY;
                    let mut glr = f64::NEG_INFINITY;
                    for kk in lo..=n {
                        let mut min_j = f64::INFINITY;
                        for &j in &hyps {
                            let sum: f64 = (kk..=n).map(|t| llr(exp.sigma_index, t, kk, j)).sum();
                            min_j = min_j.min(sum);
                            for &s in &exp.theta_indices {
                                glr = glr.max((kk..=n).map(|t| llr(s, t, kk, j)).sum());
                            }
                        }
                        msprt = msprt.max(min_j);
                    }
                    worst = worst
                        .max((traces.msprt[i].stat[n - 1] - msprt).abs())
                        .max((traces.glr[i].stat[n - 1] - glr).abs());
                }
            }
        }
    }
    Ok(Report::new("window statistics", worst, 1e-10, format!("paths of length 40, window {tw}")))
}

// ---------------------------------------------------------------------------
// χ² mean

/// Mean of the `J = 3` windowed statistic over `windows` disjoint windows
/// without attack, relative to `J·q`.
pub fn chi2_mean(windows: usize, seed: u64) -> Result<Report> {
    let (j, q, horizon) = (3usize, 2usize, 12usize);
    let model = small_model(2, q, Topology::five_node(), seed + 6)?;
    let n = model.num_nodes();
    let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), horizon)?;
    let exact = MomentHistory::new(&model, &sched, &AttackContext::none(q), horizon, MomentMode::Exact)?;
    let inn = InnovationTables::new(&exact, &model, horizon)?;
    // horizon / J disjoint windows per node per path
    let per_path = n * (horizon / j);
    let paths = windows.div_ceil(per_path);
    let sums = par_map(paths, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let traj = generate_trajectory(&model, &AttackModel::none(q), horizon, &mut rng)?;
        let est = run_filters(&model, &sched, &traj.observations)?;
        let mut total = 0.0;
        for i in 0..n {
            for t in 1..=horizon {
                let z = innovation(&model, traj.observation(t, i), &est[t - 1][i], i);
                total += inn.quadratic(t, i, z.as_slice());
            }
        }
        Ok(total)
    })?;
    let count = paths * per_path;
    let mean = sums.iter().sum::<f64>() / count as f64;
    let target = (j * q) as f64;
    Ok(Report::new(
        "chi2",
        (mean - target).abs() / target,
        0.05,
        format!("mean {mean:.4} over {count} windows, J·q = {target}"),
    ))
}

/// Geometric onset CDF check: empirical `P(τ ≤ k)` against `1 − (1−ρ)^k`.
pub fn onset_cdf_error(rho: f64, k: usize, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        if crate::sim::sample_attack_onset(rho, &mut rng)? <= k {
            hits += 1;
        }
    }
    Ok((hits as f64 / samples as f64 - (1.0 - (1.0 - rho).powi(k as i32))).abs())
}

/// Draws from `GaussianNoise` have the requested covariance.
pub fn noise_cov_error(cov: &DMatrix<f64>, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GaussianNoise::new(cov);
    let mut acc = DMatrix::zeros(cov.nrows(), cov.ncols());
    for _ in 0..samples {
        let v = g.sample(&mut rng);
        acc += &v * v.transpose();
    }
    frobenius_rel_err(&(acc / samples as f64), cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kalman_oracle_passes() {
        assert!(kcif_vs_kalman(50, 1).unwrap().passed);
    }

    #[test]
    fn schur_matches_closed_form() {
        let xx = DMatrix::from_row_slice(1, 1, &[2.0]);
        let xr = DMatrix::from_row_slice(1, 1, &[1.0]);
        let rr = DMatrix::from_row_slice(1, 1, &[4.0]);
        let (g, c) = schur_condition(&xx, &xr, &rr).unwrap();
        assert!((g[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((c[(0, 0)] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn law_error_flags_a_wrong_cross_covariance() {
        let xx = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let xr = DMatrix::from_row_slice(2, 1, &[0.8, -0.2]);
        let rr = DMatrix::from_row_slice(1, 1, &[1.5]);
        let (g, c) = schur_condition(&xx, &xr, &rr).unwrap();
        let good = ConditionalLaw::new(&xx, &xr, &rr).unwrap();
        assert!(law_error(&good, &g, &c, &rr) < 1e-14);
        let bad = ConditionalLaw::new(&xx, &(&xr * 1.01), &rr).unwrap();
        assert!(law_error(&bad, &g, &c, &rr) > 1e-3);
    }

    #[test]
    fn linear_joint_reproduces_state_covariance() {
        let model = small_model(2, 2, Topology::line(3), 4).unwrap();
        let sched = FilterSchedule::new(&model, GainMode::Fixed(0.05), 4).unwrap();
        let joint = LinearJoint::new(&model, &sched, &AttackModel::none(2), 4);
        let c = &joint.x[2];
        let b2 = c * &joint.noise_cov * c.transpose();
        let hist = MomentHistory::new(&model, &sched, &AttackContext::none(2), 4, MomentMode::Exact).unwrap();
        assert!(frobenius_rel_err(&b2, &hist.at(2).b) < 1e-12);
    }

    #[test]
    fn onset_and_noise_samplers() {
        assert!(onset_cdf_error(0.5, 2, 100_000, 3).unwrap() < 0.01);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(noise_cov_error(&cov, 100_000, 4) < 0.02);
    }
}
