//! EM refinement of a mixture of LDSs with full Kalman smoothing.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::ScheduleSet;
use crate::error::{MoldsError, Result};
use crate::kalman::{StatePrior, SuffStats};
use crate::lds::{spectral_radius, LdsParams, MoldsModel, Trajectory};
use crate::linalg::{log_sum_exp, psd_project, sym_eig_desc, symmetrize, Mat, Vector};

/// Components with less total responsibility than this are frozen.
pub const EMPTY_MASS: f64 = 1e-8;
/// Weight kept by a frozen component before renormalization.
pub const FROZEN_WEIGHT: f64 = 1e-8;
/// Pairs with smaller responsibility skip the smoother pass.
pub const SMOOTHER_SKIP: f64 = 1e-12;
/// Relative likelihood drop that aborts EM.
pub const DECREASE_ABORT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Ridge factor, scaled by the mean diagonal of each regression Gram block.
    pub ridge: f64,
    pub estimate_d: bool,
    pub seed: u64,
    /// Parameter-expanded update of the state basis: the initial-state
    /// covariance is re-estimated as a working parameter and mapped back to
    /// the fixed `N(0, I)` prior by a similarity transform.
    pub expand_prior: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            rel_tol: 1e-6,
            ridge: 1e-6,
            estimate_d: false,
            seed: 0,
            expand_prior: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(MoldsError::invalid("rel_tol", "must be > 0"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(MoldsError::invalid("ridge", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// `N×K`; rows of dropped trials are zero.
    pub gamma: Mat,
    /// `ℓ_{i,k}`, `-inf` where the filter diverged.
    pub per_trial_loglik: Mat,
    /// Per-trial log-sum-exp; `-inf` for dropped trials.
    pub lse: Vec<f64>,
    /// Trials for which every component diverged.
    pub dropped: Vec<usize>,
}

impl Responsibilities {
    /// Observed-data log-likelihood over the retained trials.
    pub fn loglik(&self) -> f64 {
        self.lse.iter().filter(|v| v.is_finite()).sum()
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.gamma.nrows())
            .map(|i| {
                let row = self.gamma.row(i);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }

    /// Mean responsibility per component over the retained trials.
    pub fn usage(&self) -> Vec<f64> {
        let kept = (self.gamma.nrows() - self.dropped.len()).max(1) as f64;
        (0..self.gamma.ncols()).map(|k| self.gamma.column(k).sum() / kept).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub loglik_per_iter: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Components frozen at least once for lack of responsibility.
    pub frozen: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EmOutput {
    pub model: MoldsModel,
    pub trace: EmTrace,
    pub resp: Responsibilities,
}

/// Per-(trial, component) sufficient statistics; `None` where skipped.
pub type PairStats = Vec<Vec<Option<SuffStats>>>;

fn check_trajs(model: &MoldsModel, trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        return Err(MoldsError::invalid("trajectories", "no trials"));
    }
    let (_, m, p) = model.dims();
    for t in trajs {
        t.validate()?;
        if t.m() != m {
            return Err(MoldsError::dim("U", format!("T×{m}"), format!("{}×{}", t.len(), t.m())));
        }
        if t.p() != p {
            return Err(MoldsError::dim("Y", format!("T×{p}"), format!("{}×{}", t.len(), t.p())));
        }
    }
    Ok(())
}

fn schedules(model: &MoldsModel, trajs: &[Trajectory], prior: &StatePrior) -> Result<Vec<ScheduleSet>> {
    model
        .components
        .par_iter()
        .map(|c| ScheduleSet::new(c, prior, trajs))
        .collect()
}

fn pair_loglik(set: &ScheduleSet, traj: &Trajectory) -> f64 {
    match set.get(traj.len()).and_then(|s| s.loglik(traj)) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("trial {:?}: {e}", traj.trial_id);
            f64::NEG_INFINITY
        }
    }
}

/// `ℓ_{i,k} = log p(Y_i | U_i, θ_k)`; diverged pairs are `-inf`.
pub fn loglik_matrix(model: &MoldsModel, trajs: &[Trajectory], prior: &StatePrior) -> Result<Mat> {
    check_trajs(model, trajs)?;
    let sets = schedules(model, trajs, prior)?;
    Ok(loglik_with(&sets, trajs))
}

fn loglik_with(sets: &[ScheduleSet], trajs: &[Trajectory]) -> Mat {
    let rows: Vec<Vec<f64>> = trajs
        .par_iter()
        .map(|traj| sets.iter().map(|s| pair_loglik(s, traj)).collect())
        .collect();
    Mat::from_fn(trajs.len(), sets.len(), |i, j| rows[i][j])
}

/// Normalizes `ℓ_{i,k} + log_prior_k` per row with the log-sum-exp trick.
pub fn normalize_responsibilities(loglik: &Mat, log_prior: Option<&[f64]>) -> Result<Responsibilities> {
    let (n, k) = loglik.shape();
    let mut gamma = Mat::zeros(n, k);
    let mut lse = vec![f64::NEG_INFINITY; n];
    let mut dropped = Vec::new();
    for i in 0..n {
        let alpha: Vec<f64> = (0..k)
            .map(|j| loglik[(i, j)] + log_prior.map_or(0.0, |lp| lp[j]))
            .collect();
        let l = log_sum_exp(&alpha);
        if !l.is_finite() {
            dropped.push(i);
            continue;
        }
        lse[i] = l;
        for j in 0..k {
            gamma[(i, j)] = (alpha[j] - l).exp();
        }
    }
    if dropped.len() == n {
        return Err(MoldsError::AllDiverged);
    }
    if !dropped.is_empty() {
        log::warn!("{} trials dropped: every component diverged", dropped.len());
    }
    Ok(Responsibilities {
        gamma,
        per_trial_loglik: loglik.clone(),
        lse,
        dropped,
    })
}

/// E-step: responsibilities under the mixture prior plus smoothed statistics
/// for every pair with non-negligible responsibility.
pub fn estep(model: &MoldsModel, trajs: &[Trajectory], prior: &StatePrior) -> Result<(Responsibilities, PairStats)> {
    check_trajs(model, trajs)?;
    let sets = schedules(model, trajs, prior)?;
    let ll = loglik_with(&sets, trajs);
    let log_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let resp = normalize_responsibilities(&ll, Some(&log_w))?;
    let stats: Vec<Vec<Option<SuffStats>>> = trajs
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            sets.iter()
                .enumerate()
                .map(|(k, set)| {
                    if resp.gamma[(i, k)] <= SMOOTHER_SKIP {
                        return Ok(None);
                    }
                    let (_, st) = set.get(traj.len())?.suff_stats(traj)?;
                    Ok(Some(st))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((resp, stats))
}

/// `S_k = Σ_i γ_{i,k} S_{i,k}`.
pub fn aggregate_stats(resp: &Responsibilities, pairs: &PairStats, dims: (usize, usize, usize)) -> Vec<SuffStats> {
    let (n, m, p) = dims;
    let k = resp.gamma.ncols();
    (0..k)
        .map(|j| {
            let mut acc = SuffStats::zeros(n, m, p);
            for (i, row) in pairs.iter().enumerate() {
                if let Some(s) = &row[j] {
                    acc.add_scaled(s, resp.gamma[(i, j)]);
                }
            }
            acc
        })
        .collect()
}

fn ridge_for(g: &Mat, ridge: f64) -> f64 {
    if ridge == 0.0 || g.nrows() == 0 {
        return 0.0;
    }
    ridge * (g.trace() / g.nrows() as f64).abs().max(f64::MIN_POSITIVE)
}

/// Solves `Θ (G + λI) = rhs` for `Θ` by Cholesky.
fn ridge_solve(rhs: &Mat, g: &Mat, ridge: f64, component: usize) -> Result<Mat> {
    let dim = g.nrows();
    let lam = ridge_for(g, ridge);
    let reg = symmetrize(g) + Mat::identity(dim, dim) * lam;
    let chol = reg.cholesky().ok_or(MoldsError::SingularRegression { component })?;
    // Θ G = rhs  ⇔  G Θᵀ = rhsᵀ
    let sol = chol.solve(&rhs.transpose()).transpose();
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(MoldsError::SingularRegression { component })
    }
}

fn hstack(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let top = hstack(a, b);
    let bottom = hstack(c, d);
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(&top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(&bottom);
    out
}

/// Symmetrizes, clips eigenvalues at zero and keeps a tiny floor so that
/// the next filter pass sees a positive-definite covariance.
pub(crate) fn covariance_update(raw: &Mat) -> Mat {
    let (vals, vecs) = sym_eig_desc(&symmetrize(raw));
    let top = vals.iter().copied().fold(0.0, f64::max);
    let floor = (1e-10 * top).max(1e-12);
    let clipped = vals.map(|v| v.max(floor));
    symmetrize(&(&vecs * Mat::from_diagonal(&clipped) * vecs.transpose()))
}

/// `(S_yy − Θ Xᵀ − X Θᵀ + Θ G Θᵀ) / count` for regression `Θ`, cross `X`, Gram `G`.
fn residual_cov(s_yy: &Mat, theta: &Mat, cross: &Mat, gram: &Mat, count: f64) -> Mat {
    let tx = theta * cross.transpose();
    (s_yy - &tx - tx.transpose() + theta * gram * theta.transpose()) / count
}

/// Closed-form M-step for one component.
pub fn mstep_component(stats: &SuffStats, prev: &LdsParams, config: &EmConfig, component: usize) -> Result<LdsParams> {
    let n = prev.n();
    let m = prev.m();
    // dynamics: [A B] from the transition blocks
    let gram_t = block2(
        &stats.s_xmxm,
        &stats.s_umxm.transpose(),
        &stats.s_umxm,
        &stats.s_umum,
    );
    let cross_t = hstack(&stats.s_xxm, &stats.s_xum);
    let phi = ridge_solve(&cross_t, &gram_t, config.ridge, component)?;
    let a = phi.columns(0, n).into_owned();
    let b = phi.columns(n, m).into_owned();
    let q = covariance_update(&residual_cov(&stats.s_xx_curr, &phi, &cross_t, &gram_t, stats.n_count.max(f64::MIN_POSITIVE)));

    // emission: C (and optionally D)
    let gram_e = block2(&stats.s_xx, &stats.s_xu, &stats.s_xu.transpose(), &stats.s_uu);
    let cross_e = hstack(&stats.s_yx, &stats.s_yu);
    let (c, d) = if config.estimate_d {
        let theta = ridge_solve(&cross_e, &gram_e, config.ridge, component)?;
        (theta.columns(0, n).into_owned(), theta.columns(n, m).into_owned())
    } else {
        let rhs = &stats.s_yx - &prev.d * stats.s_xu.transpose();
        (ridge_solve(&rhs, &stats.s_xx, config.ridge, component)?, prev.d.clone())
    };
    let theta = hstack(&c, &d);
    let r = covariance_update(&residual_cov(&stats.s_yy, &theta, &cross_e, &gram_e, stats.t_count.max(f64::MIN_POSITIVE)));
    Ok(LdsParams { a, b, c, d, q, r })
}

/// M-step over all components. Returns the new model and the indices of
/// components frozen for lack of responsibility mass.
pub fn mstep(stats: &[SuffStats], resp: &Responsibilities, prev: &MoldsModel, config: &EmConfig) -> Result<(MoldsModel, Vec<usize>)> {
    let kept = (resp.gamma.nrows() - resp.dropped.len()) as f64;
    let mut frozen = Vec::new();
    let mut components = Vec::with_capacity(prev.k());
    let mut weights = Vec::with_capacity(prev.k());
    for (k, (s, old)) in stats.iter().zip(&prev.components).enumerate() {
        let mass = resp.gamma.column(k).sum();
        if mass < EMPTY_MASS {
            log::warn!("component {k} has responsibility mass {mass:e}; frozen");
            frozen.push(k);
            components.push(old.clone());
            weights.push(FROZEN_WEIGHT);
            continue;
        }
        let mut comp = mstep_component(s, old, config, k)?;
        if config.expand_prior {
            comp = reduce_prior(&comp, &(&s.s_x0x0 / mass));
        }
        components.push(comp);
        weights.push(mass / kept);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((MoldsModel { weights, components }, frozen))
}

/// Maps a model whose initial state has second moment `p0` to the
/// equivalent model with an identity prior covariance.
fn reduce_prior(params: &LdsParams, p0: &Mat) -> LdsParams {
    let n = params.n();
    let (vals, vecs) = sym_eig_desc(&symmetrize(p0));
    if n == 0 || !(vals[n - 1] > 1e-8 * vals[0]) || !vals[0].is_finite() {
        return params.clone();
    }
    let root = &vecs * Mat::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    params.similarity(&root).unwrap_or_else(|| params.clone())
}

/// Noiseless response of `params` to the inputs of `traj`, from a zero state.
pub(crate) fn input_response(params: &LdsParams, traj: &Trajectory) -> (Vec<Vector>, Vec<Vector>) {
    let n = params.n();
    let mut x = Vector::zeros(n);
    let mut states = Vec::with_capacity(traj.len());
    let mut outputs = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let u = traj.u.row(t).transpose();
        if t > 0 {
            let um = traj.u.row(t - 1).transpose();
            x = &params.a * &x + &params.b * um;
        }
        outputs.push(&params.c * &x + &params.d * &u);
        states.push(x.clone());
    }
    (states, outputs)
}

fn response_mse(params: &LdsParams, traj: &Trajectory) -> f64 {
    let (_, yhat) = input_response(params, traj);
    yhat.iter()
        .enumerate()
        .map(|(t, y)| (traj.y.row(t).transpose() - y).norm_squared())
        .sum::<f64>()
        / traj.len() as f64
}

/// `[CA; CA²; …; CA^h]`.
fn observability(params: &LdsParams, h: usize) -> Mat {
    let p = params.p();
    let mut obs = Mat::zeros(h * p, params.n());
    let mut power = params.a.clone();
    for t in 0..h {
        obs.rows_mut(t * p, p).copy_from(&(&params.c * &power));
        power = &params.a * power;
    }
    obs
}

/// Stochastic part of a trial's output: the input-response residual with the
/// least-squares fit of the initial-state transient removed, for `t >= 1`.
struct Residuals {
    /// Per trial, rows `t = 1..T-1`.
    eps: Vec<Vec<Vector>>,
    /// Initial states fitted from the first `h` residuals.
    x0: Vec<Vector>,
}

fn stochastic_residuals(params: &LdsParams, trajs: &[&Trajectory], h: usize) -> Residuals {
    let n = params.n();
    let p = params.p();
    let obs = observability(params, h);
    let gram = obs.transpose() * &obs;
    let lam = 1e-10 * gram.diagonal().max().max(f64::MIN_POSITIVE);
    let solver = (gram + Mat::identity(n, n) * lam).cholesky();
    let mut out = Residuals {
        eps: Vec::with_capacity(trajs.len()),
        x0: Vec::with_capacity(trajs.len()),
    };
    for traj in trajs {
        let (_, yhat) = input_response(params, traj);
        let e: Vec<Vector> = (1..traj.len()).map(|t| traj.y.row(t).transpose() - &yhat[t]).collect();
        let x0 = match (&solver, e.len() >= h) {
            (Some(ch), true) => {
                let mut stacked = Vector::zeros(h * p);
                for (t, et) in e.iter().take(h).enumerate() {
                    stacked.rows_mut(t * p, p).copy_from(et);
                }
                ch.solve(&(obs.transpose() * stacked))
            }
            _ => Vector::zeros(n),
        };
        let mut free = &params.a * &x0;
        let eps = e
            .into_iter()
            .map(|et| {
                let r = et - &params.c * &free;
                free = &params.a * &free;
                r
            })
            .collect();
        out.eps.push(eps);
        out.x0.push(x0);
    }
    out
}

/// Changes the state basis so that the fitted initial states have identity
/// covariance, matching the fixed `N(0, I)` state prior. Returns the
/// parameters unchanged when that covariance is ill-conditioned.
pub(crate) fn align_prior_basis(params: &LdsParams, trajs: &[&Trajectory]) -> LdsParams {
    let n = params.n();
    let h = 2 * n;
    let res = stochastic_residuals(params, trajs, h);
    let used: Vec<&Vector> = res.x0.iter().zip(trajs).filter(|(_, t)| t.len() > h).map(|(x, _)| x).collect();
    if used.is_empty() {
        return params.clone();
    }
    let mut p0 = Mat::zeros(n, n);
    for x0 in &used {
        p0 += *x0 * x0.transpose();
    }
    let (vals, vecs) = sym_eig_desc(&symmetrize(&(p0 / used.len() as f64)));
    if !(vals[n - 1] > 1e-8 * vals[0]) {
        return params.clone();
    }
    let root = &vecs * Mat::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    params.similarity(&root).unwrap_or_else(|| params.clone())
}

/// Covariance matching on the stochastic residuals: with lag covariances
/// `Λ_j = C A^j Σ Cᵀ` (`j >= 1`) a least-squares fit gives the stationary
/// state covariance `Σ`, then `Q = Σ − AΣAᵀ` and `R = Λ_0 − CΣCᵀ`, both
/// projected onto the PSD cone.
fn match_noise(params: &LdsParams, trajs: &[&Trajectory]) -> Option<(Mat, Mat)> {
    let n = params.n();
    let p = params.p();
    let h = 2 * n;
    let res = stochastic_residuals(params, trajs, h);
    let mut lags = vec![Mat::zeros(p, p); h + 1];
    let mut counts = vec![0usize; h + 1];
    for eps in &res.eps {
        for j in 0..=h.min(eps.len().saturating_sub(1)) {
            for t in 0..eps.len() - j {
                lags[j].ger(1.0, &eps[t + j], &eps[t], 1.0);
            }
            counts[j] += eps.len() - j;
        }
    }
    if counts[0] == 0 {
        return None;
    }
    let lags: Vec<Mat> = lags
        .into_iter()
        .zip(&counts)
        .map(|(l, &c)| if c > 0 { l / c as f64 } else { l })
        .collect();
    // unknowns: upper triangle of Σ
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let mut normal = Mat::zeros(pairs.len(), pairs.len());
    let mut rhs = Vector::zeros(pairs.len());
    let mut power = params.a.clone();
    for j in 1..=h {
        if counts[j] == 0 {
            break;
        }
        let left = &params.c * &power;
        let cols: Vec<Vector> = pairs
            .iter()
            .map(|&(a, b)| {
                let mut basis = Mat::zeros(n, n);
                basis[(a, b)] = 1.0;
                basis[(b, a)] = 1.0;
                let img = &left * basis * params.c.transpose();
                Vector::from_column_slice(img.as_slice())
            })
            .collect();
        let target = Vector::from_column_slice(lags[j].as_slice());
        for (x, cx) in cols.iter().enumerate() {
            rhs[x] += cx.dot(&target);
            for (y, cy) in cols.iter().enumerate() {
                normal[(x, y)] += cx.dot(cy);
            }
        }
        power = &params.a * power;
    }
    let lam = 1e-10 * normal.diagonal().max().max(f64::MIN_POSITIVE);
    let coef = (normal + Mat::identity(pairs.len(), pairs.len()) * lam).cholesky()?.solve(&rhs);
    let mut sigma = Mat::zeros(n, n);
    for (&(a, b), v) in pairs.iter().zip(coef.iter()) {
        sigma[(a, b)] = *v;
        sigma[(b, a)] = *v;
    }
    let sigma = psd_project(&sigma);
    let q = psd_project(&symmetrize(&(&sigma - &params.a * &sigma * params.a.transpose())));
    let r = psd_project(&symmetrize(&(&lags[0] - &params.c * &sigma * params.c.transpose())));
    Some((shrink(&q), shrink(&r)))
}

/// Halfway shrinkage toward `(tr S / dim) I`.
fn shrink(s: &Mat) -> Mat {
    let dim = s.nrows();
    let iso = s.trace() / dim as f64;
    (s + Mat::identity(dim, dim) * iso) * 0.5
}

/// Result of [`init_qr`].
#[derive(Debug, Clone)]
pub struct QrInit {
    pub model: MoldsModel,
    pub labels: Vec<usize>,
    /// Components without assigned trials that received the pooled fallback.
    pub fallback: Vec<usize>,
}

/// Fills `Q` and `R` of every component from its hard-labelled trials.
///
/// Trials go to the component whose noiseless input response fits best.
/// Each component's state basis is then aligned with the state prior, and
/// the noise covariances are matched to the autocovariance of the output
/// left unexplained by inputs and initial state.
pub fn init_qr(model: &MoldsModel, trajs: &[Trajectory]) -> Result<QrInit> {
    check_trajs(model, trajs)?;
    let (n, _, p) = model.dims();
    let labels: Vec<usize> = trajs
        .iter()
        .map(|traj| {
            let mse: Vec<f64> = model.components.iter().map(|c| response_mse(c, traj)).collect();
            (0..mse.len()).fold(0, |best, k| if mse[k] < mse[best] { k } else { best })
        })
        .collect();

    let mut out = model.clone();
    let mut fitted = vec![None; model.k()];
    for (z, comp) in out.components.iter_mut().enumerate() {
        let members: Vec<&Trajectory> = trajs.iter().zip(&labels).filter(|(_, &l)| l == z).map(|(t, _)| t).collect();
        if members.is_empty() {
            continue;
        }
        *comp = align_prior_basis(comp, &members);
        fitted[z] = match_noise(comp, &members);
    }
    let count = fitted.iter().flatten().count().max(1) as f64;
    let q_scale = fitted.iter().flatten().map(|(q, _)| q.trace() / n as f64).sum::<f64>() / count;
    let r_scale = fitted.iter().flatten().map(|(_, r)| r.trace() / p as f64).sum::<f64>() / count;
    let fallback_q = Mat::identity(n, n) * if q_scale > 0.0 { q_scale } else { 1.0 };
    let fallback_r = Mat::identity(p, p) * if r_scale > 0.0 { r_scale } else { 1.0 };
    let mut fallback = Vec::new();
    for (z, (comp, fit)) in out.components.iter_mut().zip(fitted).enumerate() {
        match fit {
            Some((q, r)) => {
                comp.q = q;
                comp.r = r;
            }
            None => {
                log::warn!("component {z} received no usable trials in Q/R initialization");
                fallback.push(z);
                comp.q = fallback_q.clone();
                comp.r = fallback_r.clone();
            }
        }
    }
    Ok(QrInit {
        model: out,
        labels,
        fallback,
    })
}

/// Random baseline: entries `N(0, 0.1²)`, `A` rescaled to spectral radius 0.9
/// when unstable, `Q = R = I`, uniform weights, `D = 0`.
pub fn random_init<R: Rng + ?Sized>(k: usize, n: usize, m: usize, p: usize, rng: &mut R) -> MoldsModel {
    let dist = Normal::new(0.0, 0.1).expect("valid normal");
    let mut draw = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| dist.sample(rng));
    let components = (0..k)
        .map(|_| {
            let mut a = draw(n, n);
            let rho = spectral_radius(&a);
            if rho >= 1.0 {
                a *= 0.9 / rho;
            }
            let b = draw(n, m);
            let c = draw(p, n);
            LdsParams {
                a,
                b,
                c,
                d: Mat::zeros(p, m),
                q: Mat::identity(n, n),
                r: Mat::identity(p, p),
            }
        })
        .collect();
    MoldsModel {
        weights: vec![1.0 / k as f64; k],
        components,
    }
}

/// Alternates E- and M-steps until the relative likelihood gain drops below
/// `rel_tol` or `max_iters` M-steps have run.
pub fn run_em(init: &MoldsModel, trajs: &[Trajectory], config: &EmConfig) -> Result<EmOutput> {
    config.validate()?;
    init.validate()?;
    let (n, m, p) = init.dims();
    let prior = StatePrior::standard(n);
    let mut model = init.clone();
    let mut trace = EmTrace {
        loglik_per_iter: Vec::new(),
        iterations_used: 0,
        converged: false,
        frozen: Vec::new(),
    };
    loop {
        let (resp, pairs) = estep(&model, trajs, &prior)?;
        let cur = resp.loglik();
        if let Some(&prev) = trace.loglik_per_iter.last() {
            let rel = (cur - prev) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < -DECREASE_ABORT {
                log::error!(
                    "likelihood decrease at iteration {}: {prev} -> {cur}; weights {:?}",
                    trace.iterations_used,
                    model.weights
                );
                return Err(MoldsError::LikelihoodDecrease {
                    iter: trace.iterations_used,
                    prev,
                    cur,
                });
            }
            trace.loglik_per_iter.push(cur);
            if rel < config.rel_tol {
                trace.converged = true;
            }
        } else {
            trace.loglik_per_iter.push(cur);
        }
        if trace.converged || trace.iterations_used >= config.max_iters {
            return Ok(EmOutput { model, trace, resp });
        }
        let stats = aggregate_stats(&resp, &pairs, (n, m, p));
        let (next, frozen) = mstep(&stats, &resp, &model, config)?;
        for f in frozen {
            if !trace.frozen.contains(&f) {
                trace.frozen.push(f);
            }
        }
        model = next;
        trace.iterations_used += 1;
    }
}
