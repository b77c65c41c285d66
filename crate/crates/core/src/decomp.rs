//! Orthogonal symmetric tensor decomposition.
//!
//! Two routes recover `T̂ ≈ Σ λ_k α_k^{⊗3}` with orthonormal `α_k`:
//! simultaneous matrix diagonalization (SMD) of projected slices via Jacobi
//! joint diagonalization, and the robust tensor power method (RTPM) with
//! deflation. Both fix the sign of each `α_k` so that `λ_k > 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoldsError, Result};
use crate::linalg::{asymmetry, condition_number, random_unit_vector, Mat, Vector};
use crate::moments::Whitener;
use crate::tensor::Tensor3;

/// Default relative-change tolerance for JJD.
pub const JJD_TOL: f64 = 1e-8;
pub const JJD_MAX_SWEEPS: usize = 100;
/// Floor applied to mixture weights before renormalization.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompMethod {
    Smd,
    Rtpm,
}

impl DecompMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecompMethod::Smd => "SMD",
            DecompMethod::Rtpm => "RTPM",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DecompDiagnostics {
    /// Final off-diagonal objective (SMD) or deflation residual norm (RTPM).
    pub residual: f64,
    /// JJD sweeps (SMD) or power iterations (RTPM).
    pub iterations: usize,
    /// Components whose sign was flipped to make the weight positive.
    pub flipped: Vec<usize>,
    pub converged: bool,
    /// Stage-1 attempts needed by SMD.
    pub attempts: usize,
}

/// Result of a tensor decomposition, completed by [`unwhiten`].
#[derive(Debug, Clone)]
pub struct DecompResult {
    /// Unit-norm whitened components.
    pub alphas: Vec<Vector>,
    /// Raw tensor weights `⟨T̂, α_k^{⊗3}⟩`.
    pub weights: Vec<f64>,
    /// Unwhitened regression vectors (filled by [`unwhiten`]).
    pub betas: Vec<Vector>,
    /// `β_k / σ_u` (filled by [`unwhiten`]).
    pub markov_flat: Vec<Vector>,
    /// Mixture weights on the simplex (filled by [`unwhiten`]).
    pub mixture_weights: Vec<f64>,
    pub method: DecompMethod,
    pub diagnostics: DecompDiagnostics,
}

#[derive(Debug, Clone)]
pub struct JjdResult {
    /// Orthogonal joint diagonalizer; columns are the shared eigenvectors.
    pub u: Mat,
    /// Objective before the first sweep and after each sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// `Σ_ℓ ‖offdiag(M_ℓ)‖_F²`.
pub fn offdiag_objective(mats: &[Mat]) -> f64 {
    mats.iter()
        .map(|m| {
            let mut s = 0.0;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if i != j {
                        s += m[(i, j)] * m[(i, j)];
                    }
                }
            }
            s
        })
        .sum()
}

/// Jacobi joint diagonalization of symmetric matrices by Givens sweeps.
///
/// Each rotation is the closed-form optimum for its `(p, q)` plane, so the
/// objective never increases. Stops when the relative change over a sweep is
/// below `tol`, when no rotation is applied, or after `max_sweeps`.
pub fn jjd(mats: &[Mat], tol: f64, max_sweeps: usize) -> Result<JjdResult> {
    let first = mats
        .first()
        .ok_or_else(|| MoldsError::invalid("matrices", "empty family"))?;
    let k = first.nrows();
    for (i, m) in mats.iter().enumerate() {
        if m.shape() != (k, k) {
            return Err(MoldsError::dim("jjd matrix", format!("{k}x{k}"), crate::lds::shape(m)));
        }
        let scale = m.amax().max(1.0);
        if asymmetry(m) > 1e-10 * scale {
            return Err(MoldsError::NotSymmetric(format!("jjd input {i}")));
        }
    }
    let mut work: Vec<Mat> = mats.iter().map(crate::linalg::symmetrize).collect();
    let mut u = Mat::identity(k, k);
    let total: f64 = work.iter().map(|m| m.norm_squared()).sum();
    let mut objective = vec![offdiag_objective(&work)];
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let prev = *objective.last().expect("objective");
        if prev <= total * 1e-32 {
            break;
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (mut g00, mut g01, mut g11) = (0.0, 0.0, 0.0);
                for m in &work {
                    let h0 = m[(p, p)] - m[(q, q)];
                    let h1 = m[(p, q)] + m[(q, p)];
                    g00 += h0 * h0;
                    g01 += h0 * h1;
                    g11 += h1 * h1;
                }
                let ton = g00 - g11;
                let toff = 2.0 * g01;
                let theta = 0.5 * toff.atan2(ton + (ton * ton + toff * toff).sqrt());
                if theta.abs() < 1e-15 {
                    continue;
                }
                rotated = true;
                let (s, c) = theta.sin_cos();
                for m in work.iter_mut() {
                    // M ← Gᵀ M G
                    for r in 0..k {
                        let mp = m[(r, p)];
                        let mq = m[(r, q)];
                        m[(r, p)] = c * mp + s * mq;
                        m[(r, q)] = -s * mp + c * mq;
                    }
                    for col in 0..k {
                        let mp = m[(p, col)];
                        let mq = m[(q, col)];
                        m[(p, col)] = c * mp + s * mq;
                        m[(q, col)] = -s * mp + c * mq;
                    }
                }
                for r in 0..k {
                    let up = u[(r, p)];
                    let uq = u[(r, q)];
                    u[(r, p)] = c * up + s * uq;
                    u[(r, q)] = -s * up + c * uq;
                }
            }
        }
        let cur = offdiag_objective(&work);
        objective.push(cur);
        if !rotated || prev <= 0.0 || (prev - cur).abs() / prev < tol {
            break;
        }
    }
    Ok(JjdResult {
        u,
        objective,
        sweeps,
    })
}

/// Normalizes columns and fixes signs so that every weight is positive.
fn finish_components(
    tensor: &Tensor3,
    cols: Vec<Vector>,
    diag: &mut DecompDiagnostics,
) -> (Vec<Vector>, Vec<f64>) {
    let mut alphas = Vec::with_capacity(cols.len());
    let mut weights = Vec::with_capacity(cols.len());
    for (i, c) in cols.into_iter().enumerate() {
        let nrm = c.norm();
        let mut a = if nrm > 0.0 { c / nrm } else { c };
        let mut w = tensor.apply_triple(&a);
        if w < 0.0 {
            a.neg_mut();
            w = -w;
            diag.flipped.push(i);
        }
        alphas.push(a);
        weights.push(w);
    }
    (alphas, weights)
}

fn check_tensor(tensor: &Tensor3) -> Result<()> {
    if tensor.dim() == 0 {
        return Err(MoldsError::invalid("tensor", "empty tensor"));
    }
    let scale = tensor.frobenius().max(1.0);
    if tensor.asymmetry() > 1e-8 * scale {
        return Err(MoldsError::NotSymmetric("whitened tensor".into()));
    }
    Ok(())
}


/// Default probe count `max(2, 2K)`.
pub fn default_probes(k: usize) -> usize {
    (2 * k).max(2)
}

/// Two-stage SMD: random slice projections, then projections along the
/// stage-1 components, each jointly diagonalized by JJD.
pub fn smd_decompose<R: Rng + ?Sized>(tensor: &Tensor3, probes: usize, rng: &mut R) -> Result<DecompResult> {
    check_tensor(tensor)?;
    if probes < 2 {
        return Err(MoldsError::invalid("L0", "need at least 2 probes"));
    }
    let k = tensor.dim();
    let mut diag = DecompDiagnostics::default();
    let mut stage1 = None;
    for attempt in 1..=3 {
        diag.attempts = attempt;
        let slices: Vec<Mat> = (0..probes)
            .map(|_| tensor.contract_last(&random_unit_vector(rng, k)))
            .collect();
        let res = jjd(&slices, JJD_TOL, JJD_MAX_SWEEPS)?;
        if condition_number(&res.u) <= 1e12 {
            stage1 = Some(res);
            break;
        }
        log::warn!("SMD stage-1 diagonalizer ill-conditioned (attempt {attempt})");
    }
    let stage1 = stage1.ok_or(MoldsError::SingularDiagonalizer(3))?;
    // V⁽⁰⁾ = (U⁽⁰⁾)⁻¹; row i of V⁽⁰⁾ is the dual direction isolating component i
    let inv = stage1
        .u
        .clone()
        .lu()
        .try_inverse()
        .ok_or(MoldsError::SingularDiagonalizer(3))?;
    let slices: Vec<Mat> = (0..k)
        .map(|i| tensor.contract_last(&inv.row(i).transpose()))
        .collect();
    let stage2 = jjd(&slices, JJD_TOL, JJD_MAX_SWEEPS)?;
    diag.iterations = stage1.sweeps + stage2.sweeps;
    diag.residual = *stage2.objective.last().expect("objective");
    diag.converged = stage2.sweeps < JJD_MAX_SWEEPS;
    let cols = (0..k).map(|i| stage2.u.column(i).into_owned()).collect();
    let (alphas, weights) = finish_components(tensor, cols, &mut diag);
    Ok(DecompResult {
        alphas,
        weights,
        betas: Vec::new(),
        markov_flat: Vec::new(),
        mixture_weights: Vec::new(),
        method: DecompMethod::Smd,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtpmConfig {
    pub n_restarts: usize,
    pub n_iters: usize,
}

impl Default for RtpmConfig {
    fn default() -> Self {
        RtpmConfig {
            n_restarts: 10,
            n_iters: 100,
        }
    }
}

fn power_iterate(tensor: &Tensor3, mut theta: Vector, iters: usize, used: &mut usize) -> (Vector, bool) {
    let mut converged = false;
    for _ in 0..iters {
        *used += 1;
        let next = tensor.apply_pair(&theta);
        let nrm = next.norm();
        if nrm == 0.0 {
            break;
        }
        let next = next / nrm;
        let change = (&next - &theta).norm();
        theta = next;
        if change < 1e-12 {
            converged = true;
            break;
        }
    }
    (theta, converged)
}

/// Robust tensor power method with restarts and sequential deflation.
pub fn rtpm_decompose<R: Rng + ?Sized>(tensor: &Tensor3, config: RtpmConfig, rng: &mut R) -> Result<DecompResult> {
    check_tensor(tensor)?;
    let k = tensor.dim();
    let mut work = tensor.clone();
    let mut diag = DecompDiagnostics {
        converged: true,
        attempts: 1,
        ..Default::default()
    };
    let mut cols = Vec::with_capacity(k);
    let mut lambdas = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(f64, Vector)> = None;
        for _ in 0..config.n_restarts.max(1) {
            let start = random_unit_vector(rng, k);
            let (theta, _) = power_iterate(&work, start, config.n_iters, &mut diag.iterations);
            let val = work.apply_triple(&theta);
            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                best = Some((val, theta));
            }
        }
        let (_, theta) = best.expect("at least one restart");
        let (theta, converged) = power_iterate(&work, theta, config.n_iters, &mut diag.iterations);
        if !converged {
            diag.converged = false;
        }
        let lambda = work.apply_triple(&theta);
        work.add_rank_one(-lambda, &theta);
        cols.push(theta);
        lambdas.push(lambda);
    }
    diag.residual = work.frobenius();
    let (alphas, weights) = finish_components(tensor, cols, &mut diag);
    Ok(DecompResult {
        alphas,
        weights,
        betas: Vec::new(),
        markov_flat: Vec::new(),
        mixture_weights: Vec::new(),
        method: DecompMethod::Rtpm,
        diagnostics: diag,
    })
}

/// Clips to `[floor, 1]` and renormalizes onto the simplex.
pub fn renormalize_weights(raw: &[f64], floor: f64) -> Vec<f64> {
    let clipped: Vec<f64> = raw
        .iter()
        .map(|&w| if w.is_finite() { w.clamp(floor, 1.0) } else { floor })
        .collect();
    let total: f64 = clipped.iter().sum();
    clipped.iter().map(|w| w / total).collect()
}

/// Maps whitened components back to regression vectors and Markov parameters.
///
/// For `M2 = Σ p_k β_k β_kᵀ` the whitened tensor is `Σ p_k^{-1/2} μ_k^{⊗3}` with
/// orthonormal `μ_k = √p_k Wᵀβ_k`, so a recovered pair `(α_k, λ_k)` gives
/// `β_k = λ_k (Wᵀ)⁺ α_k` and `p_k = λ_k^{-2}`.
pub fn unwhiten(decomp: &mut DecompResult, whitener: &Whitener, sigma_u: f64) -> Result<()> {
    if !(sigma_u > 0.0) {
        return Err(MoldsError::DegenerateInputs);
    }
    let back = whitener.unwhitening();
    if back.ncols() != decomp.alphas.first().map_or(0, |a| a.len()) {
        return Err(MoldsError::dim("whitener columns", decomp.alphas.len(), back.ncols()));
    }
    decomp.betas = decomp
        .alphas
        .iter()
        .zip(&decomp.weights)
        .map(|(a, &lam)| &back * a * lam)
        .collect();
    decomp.markov_flat = decomp.betas.iter().map(|b| b / sigma_u).collect();
    let raw: Vec<f64> = decomp
        .weights
        .iter()
        .map(|&lam| if lam > 0.0 { 1.0 / (lam * lam) } else { 0.0 })
        .collect();
    decomp.mixture_weights = renormalize_weights(&raw, WEIGHT_FLOOR);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthogonal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn match_components(est: &[Vector], truth: &[Vector]) -> Vec<usize> {
        truth
            .iter()
            .map(|t| {
                (0..est.len())
                    .max_by(|&a, &b| est[a].dot(t).abs().total_cmp(&est[b].dot(t).abs()))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn jjd_single_diagonal_matrix() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![3.0, 1.0, 2.0]));
        let res = jjd(&[m], JJD_TOL, 10).unwrap();
        assert_eq!(*res.objective.last().unwrap(), 0.0);
        assert!((res.u.map(f64::abs) - Mat::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn jjd_single_symmetric_matches_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = crate::linalg::standard_normal_matrix(&mut rng, 4, 4);
        let m = &g + g.transpose();
        let res = jjd(std::slice::from_ref(&m), 1e-14, 100).unwrap();
        let d = res.u.transpose() * &m * &res.u;
        assert!(offdiag_objective(std::slice::from_ref(&d)) < 1e-20);
        let (vals, vecs) = crate::linalg::sym_eig_desc(&m);
        for i in 0..4 {
            let col = (0..4).find(|&j| (d[(j, j)] - vals[i]).abs() < 1e-9).unwrap();
            let dot = res.u.column(col).dot(&vecs.column(i)).abs();
            assert!((dot - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn jjd_recovers_shared_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_orthogonal(&mut rng, 4);
        let mats: Vec<Mat> = (0..5)
            .map(|_| {
                let d = Vector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
                &v * Mat::from_diagonal(&d) * v.transpose()
            })
            .collect();
        let res = jjd(&mats, 1e-14, 100).unwrap();
        assert!(*res.objective.last().unwrap() <= 1e-12);
        assert!((res.u.transpose() * &res.u - Mat::identity(4, 4)).norm() < 1e-10);
        let cols: Vec<Vector> = (0..4).map(|i| res.u.column(i).into_owned()).collect();
        let truth: Vec<Vector> = (0..4).map(|i| v.column(i).into_owned()).collect();
        for (t, &j) in truth.iter().zip(&match_components(&cols, &truth)) {
            assert!((cols[j].dot(t).abs() - 1.0).abs() < 1e-8);
        }
        for w in res.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn jjd_rejects_asymmetric() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(jjd(&[m], JJD_TOL, 10), Err(MoldsError::NotSymmetric(_))));
        assert!(jjd(&[], JJD_TOL, 10).is_err());
    }

    fn check_recovery(res: &DecompResult, truth: &[Vector], weights: &[f64], tol: f64) {
        let idx = match_components(&res.alphas, truth);
        for ((t, &w), &j) in truth.iter().zip(weights).zip(&idx) {
            assert!((&res.alphas[j] - t).norm() < tol, "{} vs {}", res.alphas[j], t);
            assert!((res.weights[j] - w).abs() < tol);
        }
    }

    #[test]
    fn canonical_basis_recovery() {
        let p = [0.5, 0.3, 0.2];
        let basis: Vec<Vector> = (0..3).map(|i| Mat::identity(3, 3).column(i).into_owned()).collect();
        let t = Tensor3::from_rank_one(&p, &basis);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let smd = smd_decompose(&t, default_probes(3), &mut rng).unwrap();
        check_recovery(&smd, &basis, &p, 1e-8);
        let rtpm = rtpm_decompose(&t, RtpmConfig::default(), &mut rng).unwrap();
        check_recovery(&rtpm, &basis, &p, 1e-8);
        assert!(rtpm.diagnostics.residual < 1e-8);
    }

    #[test]
    fn rotated_basis_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_orthogonal(&mut rng, 4);
        let comps: Vec<Vector> = (0..4).map(|i| r.column(i).into_owned()).collect();
        let p = [1.4, 1.1, 2.0, 1.7];
        let t = Tensor3::from_rank_one(&p, &comps);
        let smd = smd_decompose(&t, default_probes(4), &mut rng).unwrap();
        check_recovery(&smd, &comps, &p, 1e-6);
        let rtpm = rtpm_decompose(&t, RtpmConfig::default(), &mut rng).unwrap();
        check_recovery(&rtpm, &comps, &p, 1e-5);
    }

    #[test]
    fn smd_tolerates_small_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_orthogonal(&mut rng, 3);
        let comps: Vec<Vector> = (0..3).map(|i| r.column(i).into_owned()).collect();
        let p = [1.2, 1.6, 2.1];
        let t = Tensor3::from_rank_one(&p, &comps);
        let mut noise = Tensor3::from_fn(3, |_, _, _| 0.0);
        let g = Tensor3::from_fn(3, |_, _, _| rng.sample(rand_distr::StandardNormal));
        // symmetrize the perturbation
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let s = (g.get(i, j, k) + g.get(i, k, j) + g.get(j, i, k) + g.get(j, k, i) + g.get(k, i, j) + g.get(k, j, i)) / 6.0;
                    noise.set(i, j, k, s);
                }
            }
        }
        noise.scale(1e-3 / noise.frobenius());
        let smd = smd_decompose(&t.add(&noise), default_probes(3), &mut rng).unwrap();
        check_recovery(&smd, &comps, &p, 1e-2);
    }

    #[test]
    fn sign_is_fixed_by_positive_weight() {
        let basis: Vec<Vector> = (0..2).map(|i| -Mat::identity(2, 2).column(i).into_owned()).collect();
        let t = Tensor3::from_rank_one(&[1.0, 2.0], &basis);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = smd_decompose(&t, 4, &mut rng).unwrap();
        assert!(res.weights.iter().all(|&w| w > 0.0));
        check_recovery(&res, &basis, &[1.0, 2.0], 1e-10);
    }

    #[test]
    fn renormalization_arithmetic() {
        let w = renormalize_weights(&[0.7, 0.4], WEIGHT_FLOOR);
        assert!((w[0] - 0.7 / 1.1).abs() < 1e-15);
        assert!((w[1] - 0.4 / 1.1).abs() < 1e-15);
        let w = renormalize_weights(&[-1.0, 3.0], 1e-8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[0] > 0.0);
    }

    #[test]
    fn identity_unwhitening_returns_alphas() {
        let alphas = vec![Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![0.0, 1.0])];
        let mut res = DecompResult {
            alphas: alphas.clone(),
            weights: vec![1.0, 1.0],
            betas: vec![],
            markov_flat: vec![],
            mixture_weights: vec![],
            method: DecompMethod::Smd,
            diagnostics: Default::default(),
        };
        let whitener = Whitener {
            w: Mat::identity(2, 2),
            eigvals: vec![1.0, 1.0],
            eigvecs: Mat::identity(2, 2),
            residual: 0.0,
        };
        unwhiten(&mut res, &whitener, 1.0).unwrap();
        assert_eq!(res.betas, alphas);
        assert_eq!(res.markov_flat, alphas);
        assert_eq!(res.mixture_weights, vec![0.5, 0.5]);
    }
}
