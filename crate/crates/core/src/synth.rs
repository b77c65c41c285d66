//! Synthetic MoLDS generation, component alignment and error metrics.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoldsError, Result};
use crate::lds::{markov_params, simulate_lds, spectral_radius, LdsParams, MoldsModel, Trajectory};
use crate::linalg::{standard_normal_matrix, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputDist {
    #[default]
    StandardNormal,
}

/// Parameters of a random ground-truth mixture and its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "N")]
    pub n_trials: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    /// `None` means uniform.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub spectral_radius_max: f64,
    pub q_scale: f64,
    pub r_scale: f64,
    #[serde(default)]
    pub input_dist: InputDist,
    /// Minimum pairwise relative distance of Markov stacks.
    #[serde(default)]
    pub min_separation: f64,
    /// Markov length used by the separation check.
    #[serde(default = "default_separation_lag")]
    pub separation_lag: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation_lag() -> usize {
    8
}

impl GenSpec {
    /// Small-system regime used by the SMD/RTPM comparison.
    pub fn fig1(n_trials: usize, t_len: usize) -> Self {
        GenSpec {
            k: 3,
            n: 2,
            m: 1,
            p: 1,
            n_trials,
            t_len,
            weights: None,
            spectral_radius_max: 0.8,
            q_scale: 0.1,
            r_scale: 0.1,
            input_dist: InputDist::StandardNormal,
            min_separation: 0.5,
            separation_lag: 8,
            seed: 0,
        }
    }

    /// Larger MIMO regime with zero feedthrough.
    pub fn fig2(n_trials: usize, t_len: usize) -> Self {
        GenSpec {
            k: 6,
            n: 3,
            m: 2,
            p: 2,
            min_separation: 0.5,
            ..GenSpec::fig1(n_trials, t_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("K", self.k), ("n", self.n), ("m", self.m), ("p", self.p), ("N", self.n_trials), ("T", self.t_len)] {
            if v == 0 {
                return Err(MoldsError::invalid(field, "must be at least 1"));
            }
        }
        if !(self.spectral_radius_max > 0.0 && self.spectral_radius_max < 1.0) {
            return Err(MoldsError::invalid(
                "spectral_radius_max",
                format!("must lie in (0, 1), got {}", self.spectral_radius_max),
            ));
        }
        if !(self.q_scale >= 0.0) || !(self.r_scale >= 0.0) {
            return Err(MoldsError::invalid("noise_scales", "must be nonnegative"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(MoldsError::invalid("min_separation", "must be nonnegative"));
        }
        if self.separation_lag == 0 {
            return Err(MoldsError::invalid("separation_lag", "must be at least 1"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.k {
                return Err(MoldsError::dim("weights", self.k, w.len()));
            }
            if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(MoldsError::invalid("weights", "must lie on the probability simplex"));
            }
        }
        Ok(())
    }

    pub fn mixture_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0 / self.k as f64; self.k])
    }
}

fn normalize_columns(m: &mut Mat) {
    for mut col in m.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 {
            col /= nrm;
        }
    }
}

fn random_component<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> LdsParams {
    let n = spec.n;
    let mut a = standard_normal_matrix(rng, n, n);
    let lo = 0.3f64.min(spec.spectral_radius_max);
    let target = rng.gen_range(lo..=spec.spectral_radius_max);
    let rho = spectral_radius(&a);
    if rho > 0.0 {
        a *= target / rho;
    }
    let mut b = standard_normal_matrix(rng, n, spec.m);
    let mut c = standard_normal_matrix(rng, spec.p, n);
    normalize_columns(&mut b);
    normalize_columns(&mut c);
    LdsParams {
        a,
        b,
        c,
        d: Mat::zeros(spec.p, spec.m),
        q: Mat::identity(n, n) * spec.q_scale.powi(2),
        r: Mat::identity(spec.p, spec.p) * spec.r_scale.powi(2),
    }
}

/// Relative distance `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_distance(a: &Vector, b: &Vector) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// Smallest pairwise relative distance between the components' Markov stacks.
pub fn min_separation(model: &MoldsModel, lag: usize) -> Result<f64> {
    let flats: Vec<Vector> = model
        .components
        .iter()
        .map(|c| markov_params(c, lag).map(|g| g.flatten()))
        .collect::<Result<_>>()?;
    let mut best = f64::INFINITY;
    for i in 0..flats.len() {
        for j in (i + 1)..flats.len() {
            best = best.min(relative_distance(&flats[i], &flats[j]));
        }
    }
    Ok(best)
}

/// Draws a stable ground-truth mixture, resampling until components are
/// separated by at least `min_separation`.
pub fn gen_random_molds<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Result<MoldsModel> {
    spec.validate()?;
    const DRAWS: usize = 100;
    for _ in 0..DRAWS {
        let model = MoldsModel {
            weights: spec.mixture_weights(),
            components: (0..spec.k).map(|_| random_component(spec, rng)).collect(),
        };
        if spec.k == 1 || min_separation(&model, spec.separation_lag)? >= spec.min_separation {
            return Ok(model);
        }
    }
    Err(MoldsError::SeparationUnattainable {
        target: spec.min_separation,
        draws: DRAWS,
    })
}

/// Simulates `n_trials` trajectories with white Gaussian inputs and `x_0 ~ N(0, I)`.
/// Returns the trajectories and their 0-based component labels.
pub fn gen_dataset<R: Rng + ?Sized>(
    model: &MoldsModel,
    n_trials: usize,
    t_len: usize,
    rng: &mut R,
) -> Result<(Vec<Trajectory>, Vec<usize>)> {
    model.validate()?;
    if t_len == 0 {
        return Err(MoldsError::invalid("T", "must be at least 1"));
    }
    let (n, m, _) = model.dims();
    let picker = WeightedIndex::new(&model.weights).map_err(|e| MoldsError::invalid("weights", e.to_string()))?;
    let mut trajs = Vec::with_capacity(n_trials);
    let mut labels = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let z = picker.sample(rng);
        let u = standard_normal_matrix(rng, t_len, m);
        let x0 = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        let mut traj = simulate_lds(&model.components[z], &u, &x0, rng)?;
        traj.trial_id = format!("trial-{i}");
        trajs.push(traj);
        labels.push(z);
    }
    Ok((trajs, labels))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns `assignment[row] = col` and the total cost.
pub fn hungarian(cost: &Mat) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // potentials over 1-based rows/columns, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[(i, assignment[i])]).sum();
    (assignment, total)
}

/// Matching between true and estimated components.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `perm[k]` is the estimated component matched to true component `k`.
    pub perm: Vec<usize>,
    /// Euclidean distance of each matched pair of flattened Markov stacks.
    pub distances: Vec<f64>,
    /// Whether the estimate was negated to reach that distance.
    pub negated: Vec<bool>,
}

/// Aligns flattened Markov stacks by minimum total Euclidean distance.
/// With `allow_sign`, each pair may also match up to a global sign.
pub fn align_markov(est: &[Vector], truth: &[Vector], allow_sign: bool) -> Result<Alignment> {
    if est.len() != truth.len() {
        return Err(MoldsError::dim("component count", truth.len(), est.len()));
    }
    let k = truth.len();
    let pair = |t: &Vector, e: &Vector| -> (f64, bool) {
        let plain = (e - t).norm();
        if allow_sign {
            let flipped = (e + t).norm();
            if flipped < plain {
                return (flipped, true);
            }
        }
        (plain, false)
    };
    let cost = Mat::from_fn(k, k, |i, j| pair(&truth[i], &est[j]).0);
    let (perm, _) = hungarian(&cost);
    let (distances, negated) = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| pair(&truth[i], &est[j]))
        .unzip();
    Ok(Alignment {
        perm,
        distances,
        negated,
    })
}

/// Flattened length-`lag` Markov stacks of every component.
pub fn markov_stacks(model: &MoldsModel, lag: usize) -> Result<Vec<Vector>> {
    model
        .components
        .iter()
        .map(|c| markov_params(c, lag).map(|g| g.flatten()))
        .collect()
}

/// Aligns an estimated model to the truth on length-`lag` Markov stacks.
/// Scalar-output components may match up to sign.
pub fn align_components(est: &MoldsModel, truth: &MoldsModel, lag: usize) -> Result<Alignment> {
    let scalar = truth.dims().2 == 1;
    align_markov(&markov_stacks(est, lag)?, &markov_stacks(truth, lag)?, scalar)
}

/// Deterministic seed for a job identified by `parts` under a base seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &v in parts {
        h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Mean relative Frobenius error of the aligned Markov stacks.
pub fn markov_error(est: &[Vector], truth: &[Vector], alignment: &Alignment) -> f64 {
    let k = truth.len();
    truth
        .iter()
        .zip(&alignment.perm)
        .zip(&alignment.negated)
        .map(|((t, &j), &neg)| {
            let e = if neg { -&est[j] } else { est[j].clone() };
            let scale = t.norm();
            let diff = (e - t).norm();
            if scale > 0.0 {
                diff / scale
            } else {
                diff
            }
        })
        .sum::<f64>()
        / k as f64
}

/// ℓ1 distance between aligned weight vectors.
pub fn weight_error(est: &[f64], truth: &[f64], alignment: &Alignment) -> f64 {
    truth
        .iter()
        .zip(&alignment.perm)
        .map(|(t, &j)| (est[j] - t).abs())
        .sum()
}

/// Geometric mean of the mean relative errors of `A`, `B` and `C`.
///
/// Realizations are compared in their own coordinates, so a correct model in
/// a different state basis still scores a nonzero error.
pub fn agg_param_error(est: &MoldsModel, truth: &MoldsModel, alignment: &Alignment) -> f64 {
    let rel = |f: fn(&LdsParams) -> &Mat| -> f64 {
        truth
            .components
            .iter()
            .zip(&alignment.perm)
            .map(|(t, &j)| {
                let e = f(&est.components[j]);
                let t = f(t);
                if e.shape() != t.shape() {
                    return f64::INFINITY;
                }
                let scale = t.norm();
                let diff = (e - t).norm();
                if scale > 0.0 {
                    diff / scale
                } else {
                    diff
                }
            })
            .sum::<f64>()
            / truth.k() as f64
    };
    geometric_mean(&[rel(|p| &p.a), rel(|p| &p.b), rel(|p| &p.c)])
}

pub fn geometric_mean(vals: &[f64]) -> f64 {
    if vals.contains(&0.0) {
        return 0.0;
    }
    (vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(cost: &Mat) -> f64 {
        permutations(cost.nrows())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn hungarian_hand_example() {
        let cost = Mat::from_row_slice(3, 3, &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let (perm, total) = hungarian(&cost);
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(total, 0.0);
        assert_eq!(brute_force(&cost), 0.0);
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost = Mat::from_fn(n, n, |_, _| rng.gen_range(0.0..10.0));
                let (perm, total) = hungarian(&cost);
                let mut seen = perm.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total - brute_force(&cost)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generated_models_respect_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = GenSpec::fig1(10, 10);
        for _ in 0..10 {
            let model = gen_random_molds(&spec, &mut rng).unwrap();
            for c in &model.components {
                assert!(spectral_radius(&c.a) <= spec.spectral_radius_max + 1e-12);
                assert!((c.q.clone() - Mat::identity(2, 2) * 0.01).norm() < 1e-15);
            }
            assert!(min_separation(&model, spec.separation_lag).unwrap() >= 0.5);
        }
    }

    #[test]
    fn spec_validation_names_field() {
        let mut spec = GenSpec::fig1(10, 10);
        spec.spectral_radius_max = 1.5;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("spectral_radius_max"), "{msg}");
        let mut spec = GenSpec::fig1(10, 10);
        spec.min_separation = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_random_molds(&spec, &mut rng),
            Err(MoldsError::SeparationUnattainable { .. })
        ));
    }

    #[test]
    fn dataset_labels_and_determinism() {
        let mut spec = GenSpec::fig1(10, 5);
        spec.weights = Some(vec![1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = gen_random_molds(&spec, &mut rng).unwrap();
        let (_, labels) = gen_dataset(&model, 20, 5, &mut rng).unwrap();
        assert!(labels.iter().all(|&z| z == 0));

        let mut model = model;
        model.weights = vec![0.5, 0.3, 0.2];
        let (_, labels) = gen_dataset(&model, 10_000, 1, &mut rng).unwrap();
        for (k, w) in model.weights.iter().enumerate() {
            let freq = labels.iter().filter(|&&z| z == k).count() as f64 / 1e4;
            assert!((freq - w).abs() < 0.02);
        }

        let a = gen_dataset(&model, 3, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_dataset(&model, 3, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn alignment_and_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = gen_random_molds(&GenSpec::fig1(1, 1), &mut rng).unwrap();
        let al = align_components(&truth, &truth, 6).unwrap();
        assert_eq!(al.perm, vec![0, 1, 2]);
        assert!(al.distances.iter().all(|&d| d == 0.0));
        let stacks = markov_stacks(&truth, 6).unwrap();
        assert_eq!(markov_error(&stacks, &stacks, &al), 0.0);
        assert_eq!(weight_error(&truth.weights, &truth.weights, &al), 0.0);
        assert_eq!(agg_param_error(&truth, &truth, &al), 0.0);

        let mut swapped = truth.clone();
        swapped.components.swap(0, 2);
        swapped.weights = vec![0.5, 0.3, 0.2];
        let al = align_components(&swapped, &truth, 6).unwrap();
        assert_eq!(al.perm, vec![2, 1, 0]);
        assert!(al.distances.iter().all(|&d| d == 0.0));
        let est_stacks = markov_stacks(&swapped, 6).unwrap();
        assert_eq!(markov_error(&est_stacks, &stacks, &al), 0.0);

        let negated: Vec<Vector> = stacks.iter().map(|s| -s).collect();
        let al = align_markov(&negated, &stacks, true).unwrap();
        assert!(al.negated.iter().all(|&n| n));
        assert!(markov_error(&negated, &stacks, &al) < 1e-15);
    }

    #[test]
    fn metric_arithmetic() {
        let al = Alignment {
            perm: vec![0, 1],
            distances: vec![0.0, 0.0],
            negated: vec![false, false],
        };
        assert!((weight_error(&[0.6, 0.4], &[0.5, 0.5], &al) - 0.2).abs() < 1e-15);
        assert!((geometric_mean(&[0.1, 0.2, 0.4]) - 0.2).abs() < 1e-15);
    }
}
