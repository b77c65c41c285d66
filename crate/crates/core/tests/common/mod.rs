//! Test-side oracles built without the library's recursions.

#![allow(dead_code)]

use std::f64::consts::PI;

use molds_core::kalman::StatePrior;
use molds_core::linalg::{Mat, Vector};
use molds_core::{LdsParams, Trajectory};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_spd<R: Rng>(rng: &mut R, dim: usize, floor: f64) -> Mat {
    let w = normal_matrix(rng, dim, dim);
    &w * w.transpose() / dim as f64 + Mat::identity(dim, dim) * floor
}

/// Random system with spectral radius at most `radius`.
pub fn random_lds<R: Rng>(rng: &mut R, n: usize, m: usize, p: usize, radius: f64) -> LdsParams {
    let mut a = normal_matrix(rng, n, n);
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if rho > 0.0 {
        a *= radius * rng.gen_range(0.3..1.0) / rho;
    }
    LdsParams {
        a,
        b: normal_matrix(rng, n, m),
        c: normal_matrix(rng, p, n),
        d: normal_matrix(rng, p, m),
        q: random_spd(rng, n, 0.05),
        r: random_spd(rng, p, 0.05),
    }
}

pub fn random_trajectory<R: Rng>(rng: &mut R, t_len: usize, m: usize, p: usize) -> Trajectory {
    Trajectory::new(normal_matrix(rng, t_len, m), normal_matrix(rng, t_len, p), "oracle").unwrap()
}

/// Exact posterior of the stacked states given all outputs.
pub struct DenseOracle {
    pub loglik: f64,
    pub means: Vec<Vector>,
    pub covs: Vec<Mat>,
    /// `cross[t-1] = Cov[x_t, x_{t-1} | Y]`.
    pub cross: Vec<Mat>,
}

/// Builds the joint Gaussian of `(x_0..x_{T-1}, y_0..y_{T-1})` as an affine
/// map of independent noises and conditions on `Y` by dense linear algebra.
pub fn dense_oracle(params: &LdsParams, prior: &StatePrior, traj: &Trajectory) -> DenseOracle {
    let n = params.a.nrows();
    let p = params.c.nrows();
    let t_len = traj.u.nrows();
    // noise layout: x_0 - mean, w_1..w_{T-1}, v_0..v_{T-1}
    let n_noise = n * t_len + p * t_len;
    let mut noise_cov = Mat::zeros(n_noise, n_noise);
    noise_cov.view_mut((0, 0), (n, n)).copy_from(&prior.cov);
    for t in 1..t_len {
        noise_cov.view_mut((n * t, n * t), (n, n)).copy_from(&params.q);
    }
    for t in 0..t_len {
        let o = n * t_len + p * t;
        noise_cov.view_mut((o, o), (p, p)).copy_from(&params.r);
    }

    let mut gx: Vec<Mat> = Vec::with_capacity(t_len);
    let mut mx: Vec<Vector> = Vec::with_capacity(t_len);
    let mut g0 = Mat::zeros(n, n_noise);
    g0.view_mut((0, 0), (n, n)).copy_from(&Mat::identity(n, n));
    gx.push(g0);
    mx.push(prior.mean.clone());
    for t in 1..t_len {
        let mut g = &params.a * &gx[t - 1];
        let mut block = g.view_mut((0, n * t), (n, n));
        block += Mat::identity(n, n);
        gx.push(g);
        let u_prev = traj.u.row(t - 1).transpose();
        mx.push(&params.a * &mx[t - 1] + &params.b * u_prev);
    }

    let dim_x = n * t_len;
    let dim_y = p * t_len;
    let mut g_all = Mat::zeros(dim_x + dim_y, n_noise);
    let mut m_all = Vector::zeros(dim_x + dim_y);
    for t in 0..t_len {
        g_all.view_mut((n * t, 0), (n, n_noise)).copy_from(&gx[t]);
        m_all.rows_mut(n * t, n).copy_from(&mx[t]);
        let ut = traj.u.row(t).transpose();
        let mut gy = if t == 0 {
            Mat::zeros(p, n_noise)
        } else {
            &params.c * &gx[t]
        };
        let mut v = gy.view_mut((0, n * t_len + p * t), (p, p));
        v += Mat::identity(p, p);
        g_all.view_mut((dim_x + p * t, 0), (p, n_noise)).copy_from(&gy);
        let my = if t == 0 {
            &params.d * &ut
        } else {
            &params.c * &mx[t] + &params.d * &ut
        };
        m_all.rows_mut(dim_x + p * t, p).copy_from(&my);
    }
    let joint = &g_all * &noise_cov * g_all.transpose();
    let sxx = joint.view((0, 0), (dim_x, dim_x)).into_owned();
    let sxy = joint.view((0, dim_x), (dim_x, dim_y)).into_owned();
    let syy = joint.view((dim_x, dim_x), (dim_y, dim_y)).into_owned();
    let y = Vector::from_iterator(dim_y, (0..t_len).flat_map(|t| (0..p).map(move |j| (t, j))).map(|(t, j)| traj.y[(t, j)]));
    let resid = &y - m_all.rows(dim_x, dim_y);

    let chol = syy.clone().cholesky().expect("output covariance is positive definite");
    let alpha = chol.solve(&resid);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (dim_y as f64 * (2.0 * PI).ln() + logdet + resid.dot(&alpha));

    let post_mean = m_all.rows(0, dim_x) + &sxy * alpha;
    let post_cov = &sxx - &sxy * chol.solve(&sxy.transpose());
    DenseOracle {
        loglik,
        means: (0..t_len).map(|t| post_mean.rows(n * t, n).into_owned()).collect(),
        covs: (0..t_len).map(|t| post_cov.view((n * t, n * t), (n, n)).into_owned()).collect(),
        cross: (1..t_len).map(|t| post_cov.view((n * t, n * (t - 1)), (n, n)).into_owned()).collect(),
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).abs().max()
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Fraction of labels matched under the best relabeling, by enumeration.
pub fn best_label_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap_or(0) as f64
        / truth.len().max(1) as f64
}
