//! Synthetic benchmarks: SMD against RTPM over an `(N, T)` grid, and
//! tensor-initialized EM against pure tensor and randomly initialized EM.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{DecompMethod, RtpmConfig};
use crate::em::{init_qr, EmConfig};
use crate::error::Result;
use crate::lds::MoldsModel;
use crate::pipeline::{fit_from, fit_random_em, tensor_init, InitMethod, TensorInitConfig};
use crate::synth::{
    agg_param_error, align_components, derive_seed, gen_dataset, gen_random_molds, markov_error, markov_stacks,
    weight_error, GenSpec,
};

/// One method on one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "N")]
    pub n_trials: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub seed: u64,
    pub method: String,
    pub markov_err: f64,
    pub weight_err: f64,
    pub agg_param_err: f64,
    /// EM iterations, or decomposition sweeps for the tensor-only methods.
    pub iterations: usize,
    /// Seconds.
    pub wall_time: f64,
    /// `"ok"` or the error message; metrics are NaN on failure.
    pub status: String,
}

impl BenchRecord {
    fn failed(n_trials: usize, t_len: usize, seed: u64, method: &str, err: impl ToString) -> Self {
        BenchRecord {
            n_trials,
            t_len,
            seed,
            method: method.to_string(),
            markov_err: f64::NAN,
            weight_err: f64::NAN,
            agg_param_err: f64::NAN,
            iterations: 0,
            wall_time: 0.0,
            status: err.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

struct Scores {
    markov: f64,
    weight: f64,
    agg: f64,
}

fn score(est: &MoldsModel, truth: &MoldsModel, lag: usize) -> Result<Scores> {
    let al = align_components(est, truth, lag)?;
    Ok(Scores {
        markov: markov_error(&markov_stacks(est, lag)?, &markov_stacks(truth, lag)?, &al),
        weight: weight_error(&est.weights, &truth.weights, &al),
        agg: agg_param_error(est, truth, &al),
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    n_trials: usize,
    t_len: usize,
    seed: u64,
    method: &str,
    s: Scores,
    iterations: usize,
    started: Instant,
) -> BenchRecord {
    BenchRecord {
        n_trials,
        t_len,
        seed,
        method: method.to_string(),
        markov_err: s.markov,
        weight_err: s.weight,
        agg_param_err: s.agg,
        iterations,
        wall_time: started.elapsed().as_secs_f64(),
        status: "ok".to_string(),
    }
}

/// SMD-vs-RTPM grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub n_values: Vec<usize>,
    pub t_values: Vec<usize>,
    /// Datasets per cell.
    pub seeds: usize,
    pub seed: u64,
    #[serde(rename = "L")]
    pub lag: usize,
    /// Generator template; `N` and `T` are taken from the grid.
    pub spec: GenSpec,
    pub rtpm: RtpmConfig,
}

impl Default for Fig1Config {
    fn default() -> Self {
        let sizes = vec![160, 320, 640, 1280];
        Fig1Config {
            n_values: sizes.clone(),
            t_values: sizes,
            seeds: 10,
            seed: 0,
            lag: 6,
            spec: GenSpec::fig1(1, 1),
            rtpm: RtpmConfig::default(),
        }
    }
}

/// Runs SMD and RTPM tensor initialization on `seeds` datasets per `(N, T)`
/// cell. Records come in grid order, then seed, then method.
pub fn bench_fig1(cfg: &Fig1Config) -> Vec<BenchRecord> {
    let mut jobs = Vec::new();
    for &n_trials in &cfg.n_values {
        for &t_len in &cfg.t_values {
            for s in 0..cfg.seeds as u64 {
                jobs.push((n_trials, t_len, s));
            }
        }
    }
    jobs.par_iter()
        .map(|&(n_trials, t_len, s)| fig1_job(cfg, n_trials, t_len, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn fig1_job(cfg: &Fig1Config, n_trials: usize, t_len: usize, s: u64) -> Vec<BenchRecord> {
    let job_seed = derive_seed(cfg.seed, &[n_trials as u64, t_len as u64, s]);
    let methods = [DecompMethod::Smd, DecompMethod::Rtpm];
    let spec = GenSpec {
        n_trials,
        t_len,
        seed: job_seed,
        ..cfg.spec.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(job_seed);
    let data = gen_random_molds(&spec, &mut rng)
        .and_then(|truth| gen_dataset(&truth, n_trials, t_len, &mut rng).map(|(trajs, _)| (truth, trajs)));
    let (truth, trajs) = match data {
        Ok(d) => d,
        Err(e) => {
            return methods
                .iter()
                .map(|m| BenchRecord::failed(n_trials, t_len, s, m.as_str(), &e))
                .collect()
        }
    };
    methods
        .iter()
        .enumerate()
        .map(|(idx, &method)| {
            let started = Instant::now();
            let mut tcfg = TensorInitConfig::new(spec.k, spec.n, cfg.lag);
            tcfg.method = method;
            tcfg.rtpm = cfg.rtpm;
            tcfg.refine_scalar = false;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job_seed, &[idx as u64]));
            let out = tensor_init(&trajs, &tcfg, &mut rng).and_then(|init| {
                let sc = score(&init.model, &truth, cfg.lag)?;
                Ok((sc, init.decomp.diagnostics.iterations))
            });
            match out {
                Ok((sc, iters)) => record(n_trials, t_len, s, method.as_str(), sc, iters, started),
                Err(e) => BenchRecord::failed(n_trials, t_len, s, method.as_str(), e),
            }
        })
        .collect()
}

/// Mean Markov errors of both methods in one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Cell {
    pub n_trials: usize,
    pub t_len: usize,
    pub smd_mean: f64,
    pub rtpm_mean: f64,
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Median, NaN when empty.
pub fn median(vals: &[f64]) -> f64 {
    let mut v: Vec<f64> = vals.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Per-cell means over successful runs, in first-seen cell order.
pub fn fig1_summary(records: &[BenchRecord]) -> Vec<Fig1Cell> {
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for r in records {
        if !cells.contains(&(r.n_trials, r.t_len)) {
            cells.push((r.n_trials, r.t_len));
        }
    }
    let errs = |n: usize, t: usize, method: &str| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.n_trials == n && r.t_len == t && r.method == method && r.is_ok())
            .map(|r| r.markov_err)
            .collect()
    };
    cells
        .into_iter()
        .map(|(n, t)| Fig1Cell {
            n_trials: n,
            t_len: t,
            smd_mean: mean(&errs(n, t, DecompMethod::Smd.as_str())),
            rtpm_mean: mean(&errs(n, t, DecompMethod::Rtpm.as_str())),
        })
        .collect()
}

/// Tensor-EM against pure tensor and random EM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Config {
    #[serde(rename = "N")]
    pub n_trials: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub seeds: usize,
    pub seed: u64,
    #[serde(rename = "L")]
    pub lag: usize,
    pub spec: GenSpec,
    pub em: EmConfig,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Fig2Config {
            n_trials: 500,
            t_len: 400,
            seeds: 10,
            seed: 0,
            lag: 6,
            spec: GenSpec::fig2(500, 400),
            em: EmConfig {
                max_iters: 500,
                ..EmConfig::default()
            },
        }
    }
}

pub const PURE_TENSOR: &str = "pure_tensor";
pub const TENSOR_EM: &str = "tensor_em";
pub const RANDOM_EM: &str = "random_em";

/// Three records per seed: pure tensor (the model handed to EM), tensor-EM
/// and random EM, all on the same dataset.
pub fn bench_fig2(cfg: &Fig2Config) -> Vec<BenchRecord> {
    (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| fig2_job(cfg, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn fig2_job(cfg: &Fig2Config, s: u64) -> Vec<BenchRecord> {
    let (n_trials, t_len) = (cfg.n_trials, cfg.t_len);
    let job_seed = derive_seed(cfg.seed, &[s]);
    let spec = GenSpec {
        n_trials,
        t_len,
        seed: job_seed,
        ..cfg.spec.clone()
    };
    let methods = [PURE_TENSOR, TENSOR_EM, RANDOM_EM];
    let mut rng = ChaCha8Rng::seed_from_u64(job_seed);
    let data = gen_random_molds(&spec, &mut rng)
        .and_then(|truth| gen_dataset(&truth, n_trials, t_len, &mut rng).map(|(trajs, _)| (truth, trajs)));
    let (truth, trajs) = match data {
        Ok(d) => d,
        Err(e) => return methods.iter().map(|m| BenchRecord::failed(n_trials, t_len, s, m, &e)).collect(),
    };
    let em = EmConfig {
        seed: derive_seed(job_seed, &[1]),
        ..cfg.em.clone()
    };
    let mut out = Vec::with_capacity(3);

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(em.seed);
    let init = tensor_init(&trajs, &TensorInitConfig::new(spec.k, spec.n, cfg.lag), &mut rng)
        .and_then(|init| Ok((init_qr(&init.model, &trajs)?.model, init.decomp.diagnostics.iterations)));
    match init {
        Ok((model, sweeps)) => {
            match score(&model, &truth, cfg.lag) {
                Ok(sc) => out.push(record(n_trials, t_len, s, PURE_TENSOR, sc, sweeps, started)),
                Err(e) => out.push(BenchRecord::failed(n_trials, t_len, s, PURE_TENSOR, e)),
            }
            let fit = fit_from(model, &trajs, InitMethod::Tensor, cfg.lag, &em)
                .and_then(|f| Ok((score(&f.model, &truth, cfg.lag)?, f.em_trace.iterations_used)));
            out.push(match fit {
                Ok((sc, iters)) => record(n_trials, t_len, s, TENSOR_EM, sc, iters, started),
                Err(e) => BenchRecord::failed(n_trials, t_len, s, TENSOR_EM, e),
            });
        }
        Err(e) => {
            out.push(BenchRecord::failed(n_trials, t_len, s, PURE_TENSOR, &e));
            out.push(BenchRecord::failed(n_trials, t_len, s, TENSOR_EM, &e));
        }
    }

    let started = Instant::now();
    let fit = fit_random_em(&trajs, spec.n, spec.k, &em)
        .and_then(|f| Ok((score(&f.model, &truth, cfg.lag)?, f.em_trace.iterations_used)));
    out.push(match fit {
        Ok((sc, iters)) => record(n_trials, t_len, s, RANDOM_EM, sc, iters, started),
        Err(e) => BenchRecord::failed(n_trials, t_len, s, RANDOM_EM, e),
    });
    out
}

/// Medians of one method's successful runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub markov_err: f64,
    pub weight_err: f64,
    pub agg_param_err: f64,
    pub iterations: f64,
}

pub fn method_summary(records: &[BenchRecord], method: &str) -> MethodSummary {
    let ok: Vec<&BenchRecord> = records.iter().filter(|r| r.method == method && r.is_ok()).collect();
    let col = |f: fn(&BenchRecord) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    MethodSummary {
        method: method.to_string(),
        runs: ok.len(),
        markov_err: col(|r| r.markov_err),
        weight_err: col(|r| r.weight_err),
        agg_param_err: col(|r| r.agg_param_err),
        iterations: col(|r| r.iterations as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn fig1_row_count_and_determinism() {
        let cfg = Fig1Config {
            n_values: vec![20, 40],
            t_values: vec![30, 60],
            seeds: 1,
            ..Fig1Config::default()
        };
        let a = bench_fig1(&cfg);
        assert_eq!(a.len(), 2 * 2 * 2);
        let b = bench_fig1(&cfg);
        let strip = |r: &[BenchRecord]| {
            r.iter()
                .map(|x| (x.n_trials, x.t_len, x.method.clone(), x.markov_err.to_bits(), x.status.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let cells = fig1_summary(&a);
        assert_eq!(cells.len(), 4);
        for r in a.iter().filter(|r| r.is_ok()) {
            assert!(r.markov_err >= 0.0 && r.markov_err.is_finite());
            assert!(r.weight_err >= 0.0 && r.agg_param_err >= 0.0);
        }
    }
}
