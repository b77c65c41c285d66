//! Shared-gain Kalman passes for many trials of one system.
//!
//! Covariances, Kalman gains and smoother gains of a time-invariant system
//! depend only on the parameters, the prior and the step index, never on the
//! data. A [`GainSchedule`] computes them once per trajectory length; each
//! trial then only runs the mean recursions. Results agree with
//! [`crate::kalman`] up to rounding.

use std::f64::consts::PI;

use crate::error::{MoldsError, Result};
use crate::kalman::{StatePrior, SuffStats, INNOVATION_JITTER};
use crate::lds::{LdsParams, Trajectory};
use crate::linalg::{right_solve_spd, symmetrize, Mat, Vector};

/// Row-major copy of a matrix.
fn flat(m: &Mat) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out = M x` for row-major `M` (rows × x.len()).
#[inline]
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += M x`.
#[inline]
fn matvec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `acc += a bᵀ` for row-major `acc` (a.len() × b.len()).
#[inline]
fn outer_add(acc: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (row, &ai) in acc.chunks_exact_mut(cols).zip(a) {
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

fn to_mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

/// Precomputed covariance-side quantities for one `(system, prior, T)`.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    n: usize,
    m: usize,
    p: usize,
    t_len: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    prior_mean: Vec<f64>,
    /// `S_t⁻¹`, row-major, for every `t`.
    s_inv: Vec<f64>,
    /// `K_t` for `t >= 1` (index `t - 1`).
    gains: Vec<f64>,
    /// `J_{t-1}` for `t = 1..T-1` (index `t - 1`).
    smoother_gains: Vec<f64>,
    /// `Σ_t −½ (p ln 2π + ln det S_t)`.
    loglik_const: f64,
    /// Covariance parts of the emission, previous-state and cross blocks.
    cov_emit: Mat,
    cov_first: Mat,
    cov_prev: Mat,
    cov_cross: Mat,
}

struct Innovation {
    s_inv: Mat,
    logdet: f64,
}

fn factor(s: Mat, step: usize) -> Result<Innovation> {
    let p = s.nrows();
    let s = symmetrize(&s);
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => (s + Mat::identity(p, p) * INNOVATION_JITTER)
            .cholesky()
            .ok_or(MoldsError::FilterDivergence { step })?,
    };
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(MoldsError::FilterDivergence { step });
    }
    Ok(Innovation {
        s_inv: chol.inverse(),
        logdet,
    })
}

impl GainSchedule {
    pub fn new(params: &LdsParams, prior: &StatePrior, t_len: usize) -> Result<Self> {
        params.check_dims()?;
        let (n, m, p) = (params.n(), params.m(), params.p());
        if prior.mean.len() != n || prior.cov.shape() != (n, n) {
            return Err(MoldsError::dim("prior", n, prior.mean.len()));
        }
        if t_len == 0 {
            return Err(MoldsError::invalid("T", "trajectory is empty"));
        }
        let eye = Mat::identity(n, n);
        let at = params.a.transpose();
        let ct = params.c.transpose();
        let mut s_inv = Vec::with_capacity(t_len * p * p);
        let mut gains = Vec::with_capacity(t_len.saturating_sub(1) * n * p);
        let mut filtered = Vec::with_capacity(t_len);
        let mut predicted = Vec::with_capacity(t_len);
        let ln2pi = p as f64 * (2.0 * PI).ln();

        let first = factor(params.r.clone(), 0)?;
        let mut loglik_const = -0.5 * (ln2pi + first.logdet);
        s_inv.extend(flat(&first.s_inv));
        let mut cov = symmetrize(&prior.cov);
        filtered.push(cov.clone());
        predicted.push(cov.clone());
        for t in 1..t_len {
            let pcov = symmetrize(&(&params.a * &cov * &at + &params.q));
            let pct = &pcov * &ct;
            let inn = factor(&params.c * &pct + &params.r, t)?;
            loglik_const -= 0.5 * (ln2pi + inn.logdet);
            let gain = &pct * &inn.s_inv;
            let ikc = &eye - &gain * &params.c;
            cov = symmetrize(&(&ikc * &pcov * ikc.transpose() + &gain * &params.r * gain.transpose()));
            s_inv.extend(flat(&inn.s_inv));
            gains.extend(flat(&gain));
            predicted.push(pcov);
            filtered.push(cov.clone());
        }

        let mut smoother_gains = vec![0.0; t_len.saturating_sub(1) * n * n];
        let mut smoothed = filtered.clone();
        let mut cov_cross = Mat::zeros(n, n);
        for t in (1..t_len).rev() {
            let va = &filtered[t - 1] * &at;
            let j = right_solve_spd(&va, &predicted[t]).ok_or(MoldsError::FilterDivergence { step: t })?;
            let dv = &smoothed[t] - &predicted[t];
            smoothed[t - 1] = symmetrize(&(&filtered[t - 1] + &j * dv * j.transpose()));
            cov_cross += &smoothed[t] * j.transpose();
            smoother_gains[(t - 1) * n * n..t * n * n].copy_from_slice(&flat(&j));
        }
        let mut cov_emit = Mat::zeros(n, n);
        let mut cov_prev = Mat::zeros(n, n);
        for t in 1..t_len {
            cov_emit += &smoothed[t];
            cov_prev += &smoothed[t - 1];
        }
        Ok(GainSchedule {
            n,
            m,
            p,
            t_len,
            a: flat(&params.a),
            b: flat(&params.b),
            c: flat(&params.c),
            d: flat(&params.d),
            prior_mean: prior.mean.iter().copied().collect(),
            s_inv,
            gains,
            smoother_gains,
            loglik_const,
            cov_emit,
            cov_first: smoothed[0].clone(),
            cov_prev,
            cov_cross,
        })
    }

    pub fn len(&self) -> usize {
        self.t_len
    }

    pub fn is_empty(&self) -> bool {
        self.t_len == 0
    }

    fn check(&self, traj: &Trajectory) -> Result<()> {
        if traj.len() != self.t_len {
            return Err(MoldsError::dim("trajectory length", self.t_len, traj.len()));
        }
        if traj.m() != self.m {
            return Err(MoldsError::dim("U", format!("T×{}", self.m), format!("T×{}", traj.m())));
        }
        if traj.p() != self.p {
            return Err(MoldsError::dim("Y", format!("T×{}", self.p), format!("T×{}", traj.p())));
        }
        Ok(())
    }

    /// Forward mean pass. Fills filtered and predicted means (row-major,
    /// `T×n`) when buffers are given and returns the log-likelihood.
    fn forward(&self, traj: &Trajectory, mut store: Option<(&mut [f64], &mut [f64])>) -> f64 {
        let (n, m, p) = (self.n, self.m, self.p);
        let mut mean = self.prior_mean.clone();
        let mut pmean = vec![0.0; n];
        let mut u = vec![0.0; m];
        let mut uprev = vec![0.0; m];
        let mut err = vec![0.0; p];
        let mut w = vec![0.0; p];
        let mut quad = 0.0;
        for t in 0..self.t_len {
            for j in 0..m {
                u[j] = traj.u[(t, j)];
            }
            if t == 0 {
                pmean.copy_from_slice(&mean);
            } else {
                matvec(&self.a, &mean, &mut pmean);
                matvec_add(&self.b, &uprev, &mut pmean);
            }
            for i in 0..p {
                let mut yhat = 0.0;
                if t > 0 {
                    yhat += self.c[i * n..(i + 1) * n].iter().zip(&pmean).map(|(a, b)| a * b).sum::<f64>();
                }
                yhat += self.d[i * m..(i + 1) * m].iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
                err[i] = traj.y[(t, i)] - yhat;
            }
            matvec(&self.s_inv[t * p * p..(t + 1) * p * p], &err, &mut w);
            quad += err.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if t == 0 {
                mean.copy_from_slice(&pmean);
            } else {
                let k = &self.gains[(t - 1) * n * p..t * n * p];
                for i in 0..n {
                    mean[i] = pmean[i] + k[i * p..(i + 1) * p].iter().zip(&err).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some((filt, pred)) = store.as_mut() {
                filt[t * n..(t + 1) * n].copy_from_slice(&mean);
                pred[t * n..(t + 1) * n].copy_from_slice(&pmean);
            }
            std::mem::swap(&mut u, &mut uprev);
        }
        self.loglik_const - 0.5 * quad
    }

    /// Exact log-likelihood of one trial.
    pub fn loglik(&self, traj: &Trajectory) -> Result<f64> {
        self.check(traj)?;
        let ll = self.forward(traj, None);
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(MoldsError::FilterDivergence { step: self.t_len - 1 })
        }
    }

    /// Smoothed state means, row-major `T×n`.
    pub fn smoothed_means(&self, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
        self.check(traj)?;
        let n = self.n;
        let mut filt = vec![0.0; self.t_len * n];
        let mut pred = vec![0.0; self.t_len * n];
        let ll = self.forward(traj, Some((&mut filt, &mut pred)));
        if !ll.is_finite() {
            return Err(MoldsError::FilterDivergence { step: self.t_len - 1 });
        }
        let mut means = filt.clone();
        let mut diff = vec![0.0; n];
        for t in (1..self.t_len).rev() {
            for i in 0..n {
                diff[i] = means[t * n + i] - pred[t * n + i];
            }
            let j = &self.smoother_gains[(t - 1) * n * n..t * n * n];
            for i in 0..n {
                means[(t - 1) * n + i] = filt[(t - 1) * n + i] + j[i * n..(i + 1) * n].iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok((ll, means))
    }

    /// Log-likelihood and EM sufficient statistics of one trial.
    pub fn suff_stats(&self, traj: &Trajectory) -> Result<(f64, SuffStats)> {
        let (ll, xs) = self.smoothed_means(traj)?;
        let (n, m, p) = (self.n, self.m, self.p);
        let mut s_yy = vec![0.0; p * p];
        let mut s_yu = vec![0.0; p * m];
        let mut s_uu = vec![0.0; m * m];
        let mut s_yx = vec![0.0; p * n];
        let mut s_xu = vec![0.0; n * m];
        let mut s_xx = vec![0.0; n * n];
        let mut s_xxm = vec![0.0; n * n];
        let mut s_xum = vec![0.0; n * m];
        let mut s_xmxm = vec![0.0; n * n];
        let mut s_umxm = vec![0.0; m * n];
        let mut s_umum = vec![0.0; m * m];
        let mut y = vec![0.0; p];
        let mut u = vec![0.0; m];
        let mut uprev = vec![0.0; m];
        for t in 0..self.t_len {
            for i in 0..p {
                y[i] = traj.y[(t, i)];
            }
            for j in 0..m {
                u[j] = traj.u[(t, j)];
            }
            outer_add(&mut s_yy, &y, &y);
            outer_add(&mut s_yu, &y, &u);
            outer_add(&mut s_uu, &u, &u);
            if t > 0 {
                let x = &xs[t * n..(t + 1) * n];
                let xm = &xs[(t - 1) * n..t * n];
                outer_add(&mut s_yx, &y, x);
                outer_add(&mut s_xu, x, &u);
                outer_add(&mut s_xx, x, x);
                outer_add(&mut s_xxm, x, xm);
                outer_add(&mut s_xum, x, &uprev);
                outer_add(&mut s_xmxm, xm, xm);
                outer_add(&mut s_umxm, &uprev, xm);
                outer_add(&mut s_umum, &uprev, &uprev);
            }
            std::mem::swap(&mut u, &mut uprev);
        }
        let s_xx = to_mat(n, n, &s_xx) + &self.cov_emit;
        Ok((
            ll,
            SuffStats {
                s_yy: to_mat(p, p, &s_yy),
                s_yx: to_mat(p, n, &s_yx),
                s_xx_curr: s_xx.clone(),
                s_xx,
                s_xxm: to_mat(n, n, &s_xxm) + &self.cov_cross,
                s_xum: to_mat(n, m, &s_xum),
                s_xmxm: to_mat(n, n, &s_xmxm) + &self.cov_prev,
                s_umxm: to_mat(m, n, &s_umxm),
                s_umum: to_mat(m, m, &s_umum),
                s_yu: to_mat(p, m, &s_yu),
                s_xu: to_mat(n, m, &s_xu),
                s_uu: to_mat(m, m, &s_uu),
                s_x0x0: {
                    let x0 = Vector::from_column_slice(&xs[..n]);
                    &x0 * x0.transpose() + &self.cov_first
                },
                t_count: self.t_len as f64,
                n_count: (self.t_len - 1) as f64,
            },
        ))
    }
}

/// Gain schedules of one system for every distinct trajectory length.
#[derive(Debug, Clone)]
pub struct ScheduleSet {
    by_len: Vec<(usize, std::result::Result<GainSchedule, usize>)>,
}

impl ScheduleSet {
    /// Lengths whose covariance recursion diverges are remembered with the
    /// failing step.
    pub fn new(params: &LdsParams, prior: &StatePrior, trajs: &[Trajectory]) -> Result<Self> {
        let mut lens: Vec<usize> = trajs.iter().map(|t| t.len()).collect();
        lens.sort_unstable();
        lens.dedup();
        let by_len = lens
            .into_iter()
            .map(|len| match GainSchedule::new(params, prior, len) {
                Ok(s) => Ok((len, Ok(s))),
                Err(MoldsError::FilterDivergence { step }) => Ok((len, Err(step))),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        Ok(ScheduleSet { by_len })
    }

    pub fn get(&self, len: usize) -> Result<&GainSchedule> {
        match self.by_len.binary_search_by_key(&len, |(l, _)| *l) {
            Ok(i) => self.by_len[i].1.as_ref().map_err(|&step| MoldsError::FilterDivergence { step }),
            Err(_) => Err(MoldsError::dim("trajectory length", "a scheduled length", len)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{kalman_filter, kalman_loglik, kalman_smoother, suff_stats};
    use crate::lds::simulate_lds;
    use crate::linalg::{standard_normal_matrix, Vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> LdsParams {
        let mut a = standard_normal_matrix(rng, n, n);
        let rho = crate::lds::spectral_radius(&a);
        a *= 0.8 / rho.max(1e-9);
        let g = standard_normal_matrix(rng, n, n);
        let h = standard_normal_matrix(rng, p, p);
        LdsParams {
            a,
            b: standard_normal_matrix(rng, n, m),
            c: standard_normal_matrix(rng, p, n),
            d: standard_normal_matrix(rng, p, m),
            q: &g * g.transpose() * 0.1 + Mat::identity(n, n) * 0.01,
            r: &h * h.transpose() * 0.1 + Mat::identity(p, p) * 0.01,
        }
    }

    #[test]
    fn matches_reference_recursions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (n, m, p, len) in [(1, 1, 1, 1), (2, 1, 1, 5), (3, 2, 2, 30), (2, 3, 1, 12)] {
            let params = random_system(&mut rng, n, m, p);
            let prior = StatePrior {
                mean: Vector::from_fn(n, |i, _| 0.3 * i as f64 - 0.2),
                cov: Mat::identity(n, n) * 1.5,
            };
            let u = standard_normal_matrix(&mut rng, len, m);
            let traj = simulate_lds(&params, &u, &Vector::zeros(n), &mut rng).unwrap();
            let sched = GainSchedule::new(&params, &prior, len).unwrap();

            let reference = kalman_loglik(&params, &traj, &prior).unwrap();
            assert!((sched.loglik(&traj).unwrap() - reference).abs() < 1e-9 * reference.abs().max(1.0));

            let sm = kalman_smoother(&params, &traj, &prior).unwrap();
            let (_, means) = sched.smoothed_means(&traj).unwrap();
            for t in 0..len {
                for i in 0..n {
                    assert!((means[t * n + i] - sm.means[t][i]).abs() < 1e-9);
                }
            }
            let want = suff_stats(&sm, &traj).unwrap();
            let (ll, got) = sched.suff_stats(&traj).unwrap();
            assert!((ll - kalman_filter(&params, &traj, &prior).unwrap().loglik).abs() < 1e-9 * ll.abs().max(1.0));
            for (g, w) in [
                (&got.s_yy, &want.s_yy),
                (&got.s_yx, &want.s_yx),
                (&got.s_xx, &want.s_xx),
                (&got.s_xx_curr, &want.s_xx_curr),
                (&got.s_xxm, &want.s_xxm),
                (&got.s_xum, &want.s_xum),
                (&got.s_xmxm, &want.s_xmxm),
                (&got.s_umxm, &want.s_umxm),
                (&got.s_umum, &want.s_umum),
                (&got.s_yu, &want.s_yu),
                (&got.s_xu, &want.s_xu),
                (&got.s_uu, &want.s_uu),
            ] {
                assert!((g - w).norm() < 1e-9 * w.norm().max(1.0), "{g} vs {w}");
            }
            assert_eq!(got.t_count, want.t_count);
            assert_eq!(got.n_count, want.n_count);
        }
    }

    #[test]
    fn schedule_set_reports_divergence_and_lengths() {
        let mut params = LdsParams::noiseless(Mat::identity(1, 1), Mat::identity(1, 1), Mat::identity(1, 1));
        params.r = Mat::from_element(1, 1, -1.0);
        let traj = Trajectory::new(Mat::zeros(3, 1), Mat::zeros(3, 1), "a").unwrap();
        let set = ScheduleSet::new(&params, &StatePrior::standard(1), &[traj]).unwrap();
        assert!(matches!(set.get(3), Err(MoldsError::FilterDivergence { step: 0 })));
        assert!(matches!(set.get(4), Err(MoldsError::Dimension { .. })));
    }
}
