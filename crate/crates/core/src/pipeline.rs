//! End-to-end fitting: tensor initialization, Q/R initialization, EM,
//! scoring, model selection and trial assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decomp::{default_probes, renormalize_weights, WEIGHT_FLOOR, rtpm_decompose, smd_decompose, unwhiten, DecompMethod, DecompResult, RtpmConfig};
use crate::em::{init_qr, loglik_matrix, normalize_responsibilities, random_init, run_em, EmConfig, EmTrace, Responsibilities};
use crate::error::{MoldsError, Result};
use crate::kalman::{kalman_filter, prediction_sse, StatePrior};
use crate::lds::{ho_kalman_realize, MarkovSeq, MoldsModel, Trajectory};
use crate::linalg::{random_unit_vector, Mat, Vector};
use crate::moments::{build_lagged_design, compute_whitener, estimate_moments, lagged_inputs, whiten_tensor, OutputProjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Tensor,
    Random,
}

impl InitMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitMethod::Tensor => "tensor",
            InitMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for InitMethod {
    type Err = MoldsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(InitMethod::Tensor),
            "random" => Ok(InitMethod::Random),
            other => Err(MoldsError::invalid("init", format!("expected tensor or random, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorInitConfig {
    pub k: usize,
    pub n: usize,
    pub lag: usize,
    pub method: DecompMethod,
    /// Stage-1 probe count for SMD; `None` uses `max(2, 2K)`.
    pub probes: Option<usize>,
    pub rtpm: RtpmConfig,
    /// Alternating reassign/refit rounds on the full output (`p > 1` only).
    pub refine_rounds: usize,
    /// Independent projection draws for multi-output data.
    pub restarts: usize,
    /// Refine scalar-output decompositions by clustering the trials as for
    /// multi-output data. When off, the decomposition is used as is.
    pub refine_scalar: bool,
}

impl TensorInitConfig {
    pub fn new(k: usize, n: usize, lag: usize) -> Self {
        TensorInitConfig {
            k,
            n,
            lag,
            method: DecompMethod::Smd,
            probes: None,
            rtpm: RtpmConfig::default(),
            refine_rounds: 100,
            restarts: 8,
            refine_scalar: true,
        }
    }
}

/// Output of [`tensor_init`]. The model has `D = 0` and zero noise covariances.
#[derive(Debug, Clone)]
pub struct TensorInit {
    pub model: MoldsModel,
    pub decomp: DecompResult,
    /// Length-`L` Markov parameters the realizations were built from.
    pub markov: Vec<MarkovSeq>,
    /// Trial clusters used to lift a projected output back to all channels.
    pub clusters: Option<Vec<usize>>,
    pub rank_deficient: Vec<usize>,
    pub n2: usize,
    pub n3: usize,
}

/// Lagged-input regression statistics of one trial over all outputs.
struct TrialStats {
    gram: Mat,
    cross: Mat,
    energy: f64,
    steps: usize,
}

fn trial_stats(traj: &Trajectory, lag: usize) -> TrialStats {
    let d = lag * traj.m();
    let mut st = TrialStats {
        gram: Mat::zeros(d, d),
        cross: Mat::zeros(traj.p(), d),
        energy: 0.0,
        steps: 0,
    };
    for t in lag..traj.len() {
        let v = lagged_inputs(&traj.u, t, lag);
        let y = traj.y.row(t).transpose();
        st.gram.ger(1.0, &v, &v, 1.0);
        st.cross.ger(1.0, &y, &v, 1.0);
        st.energy += y.norm_squared();
        st.steps += 1;
    }
    st
}

fn stack_markov(g: &MarkovSeq) -> Mat {
    let m = g.m();
    let mut th = Mat::zeros(g.p(), g.blocks.len() * m);
    for (j, b) in g.blocks.iter().enumerate() {
        th.columns_mut(j * m, m).copy_from(b);
    }
    th
}

fn unstack_markov(theta: &Mat, lag: usize, m: usize) -> MarkovSeq {
    MarkovSeq {
        blocks: (0..lag).map(|j| theta.columns(j * m, m).into_owned()).collect(),
    }
}

/// Per-cluster least squares of all outputs on the lagged inputs.
fn lift_markov(stats: &[TrialStats], labels: &[usize], fallback: &[Mat]) -> Vec<Mat> {
    let d = stats[0].gram.nrows();
    let p = stats[0].cross.nrows();
    let k = fallback.len();
    let mut gram = vec![Mat::zeros(d, d); k];
    let mut cross = vec![Mat::zeros(p, d); k];
    let mut count = vec![0usize; k];
    for (st, &z) in stats.iter().zip(labels) {
        gram[z] += &st.gram;
        cross[z] += &st.cross;
        count[z] += st.steps;
    }
    (0..k)
        .map(|z| {
            if count[z] < d {
                log::debug!("cluster {z} has {} regression samples; keeping projected estimate", count[z]);
                return fallback[z].clone();
            }
            let lam = 1e-8 * gram[z].trace() / d as f64;
            let reg = &gram[z] + Mat::identity(d, d) * lam;
            match reg.cholesky() {
                Some(ch) => ch.solve(&cross[z].transpose()).transpose(),
                None => fallback[z].clone(),
            }
        })
        .collect()
}

fn cluster_by_projection(trajs: &[Trajectory], proj: &Vector, flats: &[Vector], lag: usize) -> Vec<usize> {
    trajs
        .iter()
        .map(|traj| {
            let mut sse = vec![0.0; flats.len()];
            for t in lag..traj.len() {
                let v = lagged_inputs(&traj.u, t, lag);
                let y = traj.y.row(t).transpose().dot(proj);
                for (s, g) in sse.iter_mut().zip(flats) {
                    let r = y - g.dot(&v);
                    *s += r * r;
                }
            }
            argmin(&sse)
        })
        .collect()
}

fn argmin_except(v: &[f64], skip: usize) -> usize {
    (0..v.len()).filter(|&z| z != skip).fold(usize::MAX, |b, z| if b == usize::MAX || v[z] < v[b] { z } else { b })
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, k| if v[k] < v[best] { k } else { best })
}

/// Per-step residual of every trial under every Markov stack, over all
/// output channels.
fn residuals_by_component(stats: &[TrialStats], thetas: &[Mat]) -> Vec<Vec<f64>> {
    stats
        .iter()
        .map(|st| {
            let steps = st.steps.max(1) as f64;
            thetas
                .iter()
                .map(|th| {
                    let sse = st.energy - 2.0 * th.dot(&st.cross) + (th * &st.gram).dot(th);
                    sse.max(0.0) / steps
                })
                .collect()
        })
        .collect()
}

/// Hard reassignment by full-output residual. A cluster left without trials
/// is reseeded with the worst-fitting trial not used as a seed yet.
fn reassign(res: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = res.iter().map(|r| argmin(r)).collect();
    let mut fit: Vec<(f64, usize)> = res.iter().zip(&labels).enumerate().map(|(i, (r, &z))| (r[z], i)).collect();
    fit.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut seeds = fit.into_iter().map(|(_, i)| i);
    for z in 0..k {
        if labels.contains(&z) {
            continue;
        }
        for i in seeds.by_ref() {
            let donor = labels[i];
            if labels.iter().filter(|&&l| l == donor).count() > 1 {
                labels[i] = z;
                break;
            }
        }
    }
    labels
}

fn clustering_residual(res: &[Vec<f64>], labels: &[usize]) -> f64 {
    res.iter().zip(labels).map(|(r, &z)| r[z]).sum()
}

/// Alternates reassignment and refits until the labels stop changing.
fn refine(stats: &[TrialStats], mut labels: Vec<usize>, fallback: &[Mat], rounds: usize) -> (Vec<usize>, Vec<Mat>, f64) {
    let k = fallback.len();
    let mut thetas = lift_markov(stats, &labels, fallback);
    let mut res = residuals_by_component(stats, &thetas);
    for _ in 0..rounds {
        let next = reassign(&res, k);
        if next == labels {
            break;
        }
        labels = next;
        thetas = lift_markov(stats, &labels, fallback);
        res = residuals_by_component(stats, &thetas);
    }
    let total = clustering_residual(&res, &labels);
    (labels, thetas, total)
}

/// Escapes merged-cluster optima: each cluster in turn is dissolved into the
/// others and reseeded with some cluster's worst-fitting trial, and the best resulting
/// clustering replaces the current one while the residual drops.
fn swap_search(
    stats: &[TrialStats],
    start: (Vec<usize>, Vec<Mat>, f64),
    fallback: &[Mat],
    rounds: usize,
) -> (Vec<usize>, Vec<Mat>, f64) {
    let k = fallback.len();
    let mut cur = start;
    if k < 2 {
        return cur;
    }
    for _ in 0..4 * k {
        let res = residuals_by_component(stats, &cur.1);
        let mut seeds: Vec<usize> = (0..k)
            .filter_map(|z| {
                (0..stats.len())
                    .filter(|&i| cur.0[i] == z)
                    .max_by(|&a, &b| res[a][z].total_cmp(&res[b][z]))
            })
            .collect();
        seeds.sort_by(|&a, &b| res[b][cur.0[b]].total_cmp(&res[a][cur.0[a]]));
        let mut improved: Option<(Vec<usize>, Vec<Mat>, f64)> = None;
        for (&seed, j) in seeds.iter().flat_map(|s| (0..k).map(move |j| (s, j))) {
            let labels: Vec<usize> = res
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    if i == seed {
                        j
                    } else if cur.0[i] == j {
                        argmin_except(r, j)
                    } else {
                        cur.0[i]
                    }
                })
                .collect();
            let cand = refine(stats, labels, fallback, rounds);
            let bar = improved.as_ref().map_or(cur.2, |c| c.2);
            if cand.2 < bar * (1.0 - 1e-9) {
                improved = Some(cand);
            }
        }
        match improved {
            Some(c) => {
                log::debug!("swap move: clustering residual {:.6e} -> {:.6e}", cur.2, c.2);
                cur = c;
            }
            None => break,
        }
    }
    cur
}

/// Moment-based initialization: lagged design, moments, whitening,
/// decomposition, unwhitening and Ho-Kalman realization per component.
///
/// The output is projected on a random unit direction; the decomposition
/// then clusters the trials, the clusters are refined by alternating
/// reassignment and per-cluster least squares on all outputs, and each
/// cluster's fit gives its Markov parameters and weight. With `restarts > 1`
/// fresh directions and decompositions are tried and the clustering with the
/// smallest residual is kept. Scalar outputs skip the refinement when
/// `refine_scalar` is off.
pub fn tensor_init<R: Rng + ?Sized>(trajs: &[Trajectory], cfg: &TensorInitConfig, rng: &mut R) -> Result<TensorInit> {
    if trajs.is_empty() {
        return Err(MoldsError::invalid("trajectories", "no trials"));
    }
    for t in trajs {
        t.validate()?;
    }
    let p = trajs[0].p();
    let m = trajs[0].m();
    if trajs.iter().any(|t| t.p() != p || t.m() != m) {
        return Err(MoldsError::invalid("trajectories", "trials disagree on m or p"));
    }
    if cfg.lag < 2 {
        return Err(MoldsError::InsufficientMarkov {
            required: 2,
            available: cfg.lag,
        });
    }
    if p == 1 && !cfg.refine_scalar {
        let (decomp, n2, n3) = decompose(trajs, &OutputProjection::Channel(0), cfg, rng)?;
        let markov: Vec<MarkovSeq> = decomp
            .markov_flat
            .iter()
            .map(|g| MarkovSeq::from_flat(g.as_slice(), 1, m))
            .collect::<Result<_>>()?;
        let weights = decomp.mixture_weights.clone();
        return realize(decomp, markov, weights, None, n2, n3, cfg);
    }

    let stats: Vec<TrialStats> = trajs.par_iter().map(|t| trial_stats(t, cfg.lag)).collect();
    let mut best: Option<(f64, TensorInit)> = None;
    let mut first_err = None;
    for attempt in 0..cfg.restarts.max(1) {
        let dir = random_unit_vector(rng, p);
        let (decomp, n2, n3) = match decompose(trajs, &OutputProjection::Direction(dir.clone()), cfg, rng) {
            Ok(d) => d,
            Err(e) => {
                log::debug!("tensor init attempt {attempt} failed: {e}");
                first_err.get_or_insert(e);
                continue;
            }
        };
        let fallback: Vec<MarkovSeq> = decomp
            .markov_flat
            .iter()
            .map(|g| {
                MarkovSeq::from_flat(g.as_slice(), 1, m).map(|s| MarkovSeq {
                    blocks: s.blocks.iter().map(|b| &dir * b).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let fallback: Vec<Mat> = fallback.iter().map(stack_markov).collect();
        let labels = cluster_by_projection(trajs, &dir, &decomp.markov_flat, cfg.lag);
        let refined = refine(&stats, labels, &fallback, cfg.refine_rounds);
        let (labels, thetas, residual) = swap_search(&stats, refined, &fallback, cfg.refine_rounds);
        let markov: Vec<MarkovSeq> = thetas.iter().map(|th| unstack_markov(th, cfg.lag, m)).collect();
        log::debug!("tensor init attempt {attempt}: clustering residual {residual:.6e}");
        if best.as_ref().is_some_and(|(b, _)| *b <= residual) {
            continue;
        }
        let mut counts = vec![0.0; cfg.k];
        for &z in &labels {
            counts[z] += 1.0 / labels.len() as f64;
        }
        let weights = renormalize_weights(&counts, WEIGHT_FLOOR);
        let init = realize(decomp, markov, weights, Some(labels), n2, n3, cfg)?;
        best = Some((residual, init));
    }
    match (best, first_err) {
        (Some((_, init)), _) => Ok(init),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one attempt runs"),
    }
}

fn decompose<R: Rng + ?Sized>(
    trajs: &[Trajectory],
    proj: &OutputProjection,
    cfg: &TensorInitConfig,
    rng: &mut R,
) -> Result<(DecompResult, usize, usize)> {
    let design = build_lagged_design(trajs, cfg.lag, proj).map_err(|e| e.in_stage("moments"))?;
    let dim = design.dim();
    let moments = estimate_moments(&design.samples, design.sigma_u).map_err(|e| e.in_stage("moments"))?;
    if moments.n2.min(moments.n3) < 10 * dim {
        log::warn!(
            "few moment samples: |N2| = {}, |N3| = {}, d = {dim}",
            moments.n2,
            moments.n3
        );
    }
    let whitener = compute_whitener(&moments.m2, cfg.k).map_err(|e| e.in_stage("whitening"))?;
    let tensor = whiten_tensor(&moments.m3, &whitener).map_err(|e| e.in_stage("whitening"))?;
    let mut decomp = match cfg.method {
        DecompMethod::Smd => smd_decompose(&tensor, cfg.probes.unwrap_or_else(|| default_probes(cfg.k)), rng),
        DecompMethod::Rtpm => rtpm_decompose(&tensor, cfg.rtpm, rng),
    }
    .map_err(|e| e.in_stage("decomposition"))?;
    unwhiten(&mut decomp, &whitener, design.sigma_u).map_err(|e| e.in_stage("decomposition"))?;
    Ok((decomp, moments.n2, moments.n3))
}

fn realize(
    decomp: DecompResult,
    markov: Vec<MarkovSeq>,
    weights: Vec<f64>,
    clusters: Option<Vec<usize>>,
    n2: usize,
    n3: usize,
    cfg: &TensorInitConfig,
) -> Result<TensorInit> {
    let mut components = Vec::with_capacity(cfg.k);
    let mut rank_deficient = Vec::new();
    for (k, g) in markov.iter().enumerate() {
        let real = ho_kalman_realize(g, cfg.n).map_err(|e| e.in_stage("realization"))?;
        if real.rank_deficient {
            rank_deficient.push(k);
        }
        components.push(real.params);
    }
    Ok(TensorInit {
        model: MoldsModel { weights, components },
        decomp,
        markov,
        clusters,
        rank_deficient,
        n2,
        n3,
    })
}

/// Total free parameters of a mixture.
pub fn param_count(k: usize, n: usize, m: usize, p: usize, estimate_d: bool) -> usize {
    let per = n * n + n * m + p * n + if estimate_d { p * m } else { 0 } + n * (n + 1) / 2 + p * (p + 1) / 2;
    k - 1 + k * per
}

/// `2·nll + p_θ·ln N_obs`.
pub fn bic(nll: f64, params: usize, n_obs: usize) -> f64 {
    2.0 * nll + params as f64 * (n_obs as f64).ln()
}

/// Scores of a model on a set of trials.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Negative mixture log-likelihood.
    pub nll: f64,
    /// One-step prediction RMSE under each trial's most responsible component.
    pub rmse: f64,
    pub bic: f64,
    pub n_obs: usize,
    pub resp: Responsibilities,
}

pub fn evaluate(model: &MoldsModel, trajs: &[Trajectory], estimate_d: bool) -> Result<Evaluation> {
    let (n, m, p) = model.dims();
    let prior = StatePrior::standard(n);
    let ll = loglik_matrix(model, trajs, &prior)?;
    let log_w: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let resp = normalize_responsibilities(&ll, Some(&log_w))?;
    let nll = -resp.loglik();
    let labels = resp.hard_labels();
    let mut sse = 0.0;
    let mut count = 0usize;
    for (i, (traj, &z)) in trajs.iter().zip(&labels).enumerate() {
        if resp.dropped.contains(&i) {
            continue;
        }
        let filt = kalman_filter(&model.components[z], traj, &prior)?;
        sse += prediction_sse(&filt, traj);
        count += traj.len() * traj.p();
    }
    let n_obs: usize = trajs.iter().map(|t| t.len() * t.p()).sum();
    Ok(Evaluation {
        nll,
        rmse: (sse / count.max(1) as f64).sqrt(),
        bic: bic(nll, param_count(model.k(), n, m, p, estimate_d), n_obs),
        n_obs,
        resp,
    })
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: MoldsModel,
    pub nll: f64,
    pub rmse: f64,
    pub bic: f64,
    pub em_trace: EmTrace,
    pub init_method: InitMethod,
    pub k: usize,
    pub n: usize,
    pub lag: usize,
    pub seed: u64,
    /// Usage fractions under the final responsibilities.
    pub usage: Vec<f64>,
    /// Model handed to EM.
    pub init_model: MoldsModel,
}

/// Tensor initialization followed by Q/R initialization and EM, scored on
/// the training trials.
pub fn fit_tensor_em(trajs: &[Trajectory], lag: usize, n: usize, k: usize, config: &EmConfig) -> Result<FitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = tensor_init(trajs, &TensorInitConfig::new(k, n, lag), &mut rng).map_err(|e| e.in_stage("tensor_init"))?;
    let qr = init_qr(&init.model, trajs).map_err(|e| e.in_stage("qr_init"))?;
    fit_from(qr.model, trajs, InitMethod::Tensor, lag, config)
}

/// EM from a random initialization.
pub fn fit_random_em(trajs: &[Trajectory], n: usize, k: usize, config: &EmConfig) -> Result<FitReport> {
    let first = trajs.first().ok_or_else(|| MoldsError::invalid("trajectories", "no trials"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = random_init(k, n, first.m(), first.p(), &mut rng);
    fit_from(init, trajs, InitMethod::Random, 0, config)
}

/// Runs EM from `init` and scores the result on the same trials.
pub fn fit_from(init: MoldsModel, trajs: &[Trajectory], method: InitMethod, lag: usize, config: &EmConfig) -> Result<FitReport> {
    let out = run_em(&init, trajs, config).map_err(|e| e.in_stage("em"))?;
    let eval = evaluate(&out.model, trajs, config.estimate_d).map_err(|e| e.in_stage("evaluation"))?;
    Ok(FitReport {
        k: out.model.k(),
        n: out.model.dims().0,
        lag,
        nll: eval.nll,
        rmse: eval.rmse,
        bic: eval.bic,
        usage: eval.resp.usage(),
        em_trace: out.trace,
        init_method: method,
        seed: config.seed,
        model: out.model,
        init_model: init,
    })
}

/// One row of the model-selection table.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub k: usize,
    pub n: usize,
    pub lag: usize,
    pub nll: f64,
    pub rmse: f64,
    pub bic: f64,
    pub iterations: usize,
    /// `"ok"` or the error message.
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// Best fit, with `nll`, `rmse` and `bic` measured on the validation trials.
    pub best: FitReport,
    pub table: Vec<GridRow>,
}

/// Deterministic per-grid-point seed.
pub fn grid_seed(seed: u64, k: usize, n: usize, lag: usize) -> u64 {
    crate::synth::derive_seed(seed, &[k as u64, n as u64, lag as u64])
}

/// Fits every `(K, n, L)` on the training trials with tensor-initialized EM,
/// scores on the validation trials and keeps the lowest BIC (ties: lower NLL,
/// then lower K).
pub fn model_select(train: &[Trajectory], val: &[Trajectory], grid: &[(usize, usize, usize)], config: &EmConfig) -> Result<Selection> {
    if train.is_empty() || val.is_empty() {
        return Err(MoldsError::invalid("trajectories", "train and validation splits must be non-empty"));
    }
    if grid.is_empty() {
        return Err(MoldsError::invalid("grid", "empty grid"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<FitReport> = None;
    for &(k, n, lag) in grid {
        let cfg = EmConfig {
            seed: grid_seed(config.seed, k, n, lag),
            ..config.clone()
        };
        let scored = fit_tensor_em(train, lag, n, k, &cfg).and_then(|mut fit| {
            let eval = evaluate(&fit.model, val, cfg.estimate_d).map_err(|e| e.in_stage("validation"))?;
            fit.nll = eval.nll;
            fit.rmse = eval.rmse;
            fit.bic = eval.bic;
            fit.usage = eval.resp.usage();
            Ok(fit)
        });
        match scored {
            Ok(fit) => {
                table.push(GridRow {
                    k,
                    n,
                    lag,
                    nll: fit.nll,
                    rmse: fit.rmse,
                    bic: fit.bic,
                    iterations: fit.em_trace.iterations_used,
                    status: "ok".into(),
                });
                let better = match &best {
                    None => true,
                    Some(b) => (fit.bic, fit.nll, fit.k) < (b.bic, b.nll, b.k),
                };
                if better && fit.bic.is_finite() {
                    best = Some(fit);
                }
            }
            Err(e) => {
                log::warn!("grid point K={k} n={n} L={lag} failed: {e}");
                table.push(GridRow {
                    k,
                    n,
                    lag,
                    nll: f64::NAN,
                    rmse: f64::NAN,
                    bic: f64::NAN,
                    iterations: 0,
                    status: e.to_string(),
                });
            }
        }
    }
    let best = best.ok_or(MoldsError::AllGridPointsFailed)?;
    Ok(Selection { best, table })
}

#[derive(Debug, Clone)]
pub struct AssignmentReport {
    pub trial_ids: Vec<String>,
    /// `N×K` softmax of the per-component log-likelihoods (no mixture prior).
    pub responsibilities: Mat,
    pub hard_labels: Vec<usize>,
    pub usage: Vec<f64>,
}

/// Posterior-free trial assignment from per-component likelihoods.
pub fn assign_trials(model: &MoldsModel, trajs: &[Trajectory]) -> Result<AssignmentReport> {
    model.validate()?;
    let prior = StatePrior::standard(model.dims().0);
    let ll = loglik_matrix(model, trajs, &prior)?;
    let resp = normalize_responsibilities(&ll, None)?;
    Ok(AssignmentReport {
        trial_ids: trajs.iter().map(|t| t.trial_id.clone()).collect(),
        hard_labels: resp.hard_labels(),
        usage: resp.usage(),
        responsibilities: resp.gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{markov_params, LdsParams};
    use crate::synth::{gen_dataset, gen_random_molds, GenSpec};

    #[test]
    fn bic_arithmetic() {
        assert!((bic(100.0, 10, 1000) - 269.077_552_789_821_4).abs() < 1e-9);
        assert_eq!(param_count(1, 1, 1, 1, false), 5);
        assert_eq!(param_count(2, 2, 1, 1, true), 1 + 2 * (4 + 2 + 2 + 1 + 3 + 1));
    }

    #[test]
    fn grid_seed_is_deterministic_and_spread() {
        assert_eq!(grid_seed(1, 2, 3, 4), grid_seed(1, 2, 3, 4));
        assert_ne!(grid_seed(1, 2, 3, 4), grid_seed(1, 3, 2, 4));
        assert_ne!(grid_seed(1, 2, 3, 4), grid_seed(2, 2, 3, 4));
    }

    #[test]
    fn single_component_noiseless_markov_recovery() {
        let truth = LdsParams::noiseless(
            Mat::from_row_slice(2, 2, &[0.6, 0.3, -0.2, 0.4]),
            Mat::from_row_slice(2, 1, &[1.0, 0.5]),
            Mat::from_row_slice(1, 2, &[1.0, -0.7]),
        );
        let model = MoldsModel {
            weights: vec![1.0],
            components: vec![truth.clone()],
        };
        let g = markov_params(&truth, 6).unwrap().flatten();
        let mean_err = |trials: usize| -> f64 {
            (0..4)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (trajs, _) = gen_dataset(&model, trials, 3001, &mut rng).unwrap();
                    let cfg = TensorInitConfig {
                        refine_scalar: false,
                        ..TensorInitConfig::new(1, 2, 6)
                    };
                    let init = tensor_init(&trajs, &cfg, &mut rng).unwrap();
                    (init.markov[0].flatten() - &g).norm() / g.norm()
                })
                .sum::<f64>()
                / 4.0
        };
        let small = mean_err(50);
        let large = mean_err(800);
        assert!(large < 0.05, "{large}");
        assert!(large < small, "{small} -> {large}");
    }

    #[test]
    fn zero_inputs_are_degenerate() {
        let traj = Trajectory::new(Mat::zeros(20, 1), Mat::from_element(20, 1, 1.0), "a").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = tensor_init(&[traj], &TensorInitConfig::new(1, 1, 4), &mut rng).unwrap_err();
        assert!(matches!(err.root(), MoldsError::DegenerateInputs), "{err}");
    }

    #[test]
    fn oversized_k_reports_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = gen_random_molds(&GenSpec::fig1(1, 1), &mut rng).unwrap();
        let (trajs, _) = gen_dataset(&truth, 20, 50, &mut rng).unwrap();
        let err = fit_tensor_em(&trajs, 3, 2, 5, &EmConfig::default()).unwrap_err();
        assert!(matches!(err.root(), MoldsError::RankDeficient { k: 5, .. }));
        assert!(err.to_string().starts_with("whitening: mixture rank deficient"), "{err}");
    }

    #[test]
    fn assignment_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = gen_random_molds(&GenSpec::fig1(1, 1), &mut rng).unwrap();
        let (trajs, _) = gen_dataset(&truth, 8, 30, &mut rng).unwrap();
        let same = MoldsModel {
            weights: vec![0.25; 4],
            components: vec![truth.components[0].clone(); 4],
        };
        let rep = assign_trials(&same, &trajs).unwrap();
        for i in 0..8 {
            for k in 0..4 {
                assert!((rep.responsibilities[(i, k)] - 0.25).abs() < 1e-12);
            }
        }
        for u in rep.usage {
            assert!((u - 0.25).abs() < 1e-12);
        }
        let single = MoldsModel {
            weights: vec![1.0],
            components: vec![truth.components[1].clone()],
        };
        let rep = assign_trials(&single, &trajs).unwrap();
        assert!(rep.responsibilities.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn single_grid_point_is_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = gen_random_molds(&GenSpec::fig1(1, 1), &mut rng).unwrap();
        let (train, _) = gen_dataset(&truth, 40, 80, &mut rng).unwrap();
        let (val, _) = gen_dataset(&truth, 10, 80, &mut rng).unwrap();
        let cfg = EmConfig {
            max_iters: 5,
            ..Default::default()
        };
        let sel = model_select(&train, &val, &[(3, 2, 6)], &cfg).unwrap();
        assert_eq!(sel.table.len(), 1);
        assert_eq!((sel.best.k, sel.best.n, sel.best.lag), (3, 2, 6));
        assert_eq!(sel.table[0].bic, sel.best.bic);
    }

    #[test]
    fn training_nll_matches_final_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = gen_random_molds(&GenSpec::fig1(1, 1), &mut rng).unwrap();
        let (trajs, _) = gen_dataset(&truth, 30, 60, &mut rng).unwrap();
        let cfg = EmConfig {
            max_iters: 4,
            ..Default::default()
        };
        let fit = fit_tensor_em(&trajs, 6, 2, 3, &cfg).unwrap();
        let last = *fit.em_trace.loglik_per_iter.last().unwrap();
        assert!((fit.nll + last).abs() <= 1e-6 * last.abs());
    }
}
