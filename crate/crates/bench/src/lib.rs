//! Criterion benchmarks for the hot paths: Kalman passes, moment
//! estimation, tensor decomposition and one EM iteration.

use criterion::{BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molds_core::batch::GainSchedule;
use molds_core::decomp::{default_probes, rtpm_decompose, smd_decompose, RtpmConfig};
use molds_core::em::{random_init, run_em};
use molds_core::kalman::{kalman_loglik, kalman_smoother, StatePrior};
use molds_core::linalg::{random_orthogonal, Vector};
use molds_core::moments::{build_lagged_design, estimate_moments, OutputProjection};
use molds_core::synth::{gen_dataset, gen_random_molds};
use molds_core::tensor::Tensor3;
use molds_core::{EmConfig, GenSpec, MoldsModel, Trajectory};

fn fixture(spec: &GenSpec, seed: u64) -> (MoldsModel, Vec<Trajectory>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = gen_random_molds(spec, &mut rng).expect("spec is valid");
    let (trajs, _) = gen_dataset(&truth, spec.n_trials, spec.t_len, &mut rng).expect("simulation");
    (truth, trajs)
}

pub fn kalman(c: &mut Criterion) {
    let mut group = c.benchmark_group("kalman");
    for t_len in [100, 1000] {
        let (truth, trajs) = fixture(&GenSpec::fig2(1, t_len), 1);
        let params = &truth.components[0];
        let traj = &trajs[0];
        let prior = StatePrior::standard(params.n());
        group.throughput(Throughput::Elements(t_len as u64));
        group.bench_with_input(BenchmarkId::new("loglik", t_len), &t_len, |b, _| {
            b.iter(|| kalman_loglik(params, traj, &prior).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("smoother", t_len), &t_len, |b, _| {
            b.iter(|| kalman_smoother(params, traj, &prior).unwrap())
        });
        let sched = GainSchedule::new(params, &prior, t_len).unwrap();
        group.bench_with_input(BenchmarkId::new("schedule_loglik", t_len), &t_len, |b, _| {
            b.iter(|| sched.loglik(traj).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("schedule_stats", t_len), &t_len, |b, _| {
            b.iter(|| sched.suff_stats(traj).unwrap())
        });
    }
    group.finish();
}

pub fn moments(c: &mut Criterion) {
    let (_, trajs) = fixture(&GenSpec::fig1(200, 400), 2);
    let design = build_lagged_design(&trajs, 6, &OutputProjection::Channel(0)).unwrap();
    let mut group = c.benchmark_group("moments");
    group.throughput(Throughput::Elements(design.samples.len() as u64));
    group.bench_function("lagged_design", |b| {
        b.iter(|| build_lagged_design(&trajs, 6, &OutputProjection::Channel(0)).unwrap())
    });
    group.bench_function("estimate", |b| b.iter(|| estimate_moments(&design.samples, design.sigma_u).unwrap()));
    group.finish();
}

pub fn decomposition(c: &mut Criterion) {
    let mut group = c.benchmark_group("decomposition");
    for k in [3, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = random_orthogonal(&mut rng, k);
        let comps: Vec<Vector> = (0..k).map(|i| basis.column(i).into_owned()).collect();
        let weights: Vec<f64> = (0..k).map(|i| 1.0 + i as f64 / k as f64).collect();
        let tensor = Tensor3::from_rank_one(&weights, &comps);
        group.bench_with_input(BenchmarkId::new("smd", k), &k, |b, &k| {
            b.iter(|| smd_decompose(&tensor, default_probes(k), &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rtpm", k), &k, |b, _| {
            b.iter(|| rtpm_decompose(&tensor, RtpmConfig::default(), &mut rng).unwrap())
        });
    }
    group.finish();
}

pub fn em_iteration(c: &mut Criterion) {
    let (_, trajs) = fixture(&GenSpec::fig1(100, 200), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = random_init(3, 2, 1, 1, &mut rng);
    let cfg = EmConfig {
        max_iters: 1,
        ..EmConfig::default()
    };
    let mut group = c.benchmark_group("em");
    group.sample_size(20);
    group.bench_function("iteration_k3_n100_t200", |b| b.iter(|| run_em(&init, &trajs, &cfg).unwrap()));
    group.finish();
}
