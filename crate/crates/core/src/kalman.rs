//! Kalman filter, RTS smoother and the EM sufficient statistics.
//!
//! All recursions follow the timing convention documented in [`crate::lds`]:
//! `y_0` is emitted without state, `x_0` carries the prior, and `y_t` for
//! `t >= 1` observes `x_t`.

use std::f64::consts::PI;

use crate::error::{MoldsError, Result};
use crate::lds::{LdsParams, Trajectory};
use crate::linalg::{right_solve_spd, symmetrize, Mat, Vector};

/// Jitter added to an innovation covariance whose Cholesky factorization fails.
pub const INNOVATION_JITTER: f64 = 1e-9;

/// Gaussian prior on the initial state `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePrior {
    pub mean: Vector,
    pub cov: Mat,
}

impl StatePrior {
    /// `N(0, I_n)`.
    pub fn standard(n: usize) -> Self {
        StatePrior {
            mean: Vector::zeros(n),
            cov: Mat::identity(n, n),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.mean.len() != n {
            return Err(MoldsError::dim("prior mean", n, self.mean.len()));
        }
        if self.cov.shape() != (n, n) {
            return Err(MoldsError::dim("prior cov", format!("{n}x{n}"), crate::lds::shape(&self.cov)));
        }
        Ok(())
    }
}

/// Output of [`kalman_filter`].
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub loglik: f64,
    /// One-step output predictions `ŷ_t`.
    pub pred_means: Vec<Vector>,
    /// `E[x_t | y_{0:t}]`.
    pub filtered_means: Vec<Vector>,
    pub filtered_covs: Vec<Mat>,
    /// `E[x_t | y_{0:t-1}]` (the prior at `t = 0`).
    pub predicted_means: Vec<Vector>,
    pub predicted_covs: Vec<Mat>,
}

/// Output of [`kalman_smoother`].
#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub loglik: f64,
    /// `E[x_t | Y]`.
    pub means: Vec<Vector>,
    /// `Cov[x_t | Y]`.
    pub covs: Vec<Mat>,
    /// `cross[t-1] = Cov[x_t, x_{t-1} | Y]` for `t = 1..T-1`.
    pub cross: Vec<Mat>,
}

struct Innovation {
    loglik: f64,
    /// `S⁻¹ e`
    weighted: Vector,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn innovation(err: &Vector, s: Mat, step: usize) -> Result<Innovation> {
    let p = s.nrows();
    let s = symmetrize(&s);
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => (s + Mat::identity(p, p) * INNOVATION_JITTER)
            .cholesky()
            .ok_or(MoldsError::FilterDivergence { step })?,
    };
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let weighted = chol.solve(err);
    let quad = err.dot(&weighted);
    let loglik = -0.5 * (p as f64 * (2.0 * PI).ln() + logdet + quad);
    if !loglik.is_finite() {
        return Err(MoldsError::FilterDivergence { step });
    }
    Ok(Innovation {
        loglik,
        weighted,
        chol,
    })
}

fn check_inputs(params: &LdsParams, traj: &Trajectory, prior: &StatePrior) -> Result<()> {
    params.check_dims()?;
    traj.check_against(params)?;
    prior.check(params.n())
}

/// Forward Kalman filter returning the exact Gaussian log-likelihood of `Y | U`.
pub fn kalman_filter(params: &LdsParams, traj: &Trajectory, prior: &StatePrior) -> Result<FilterResult> {
    check_inputs(params, traj, prior)?;
    let t_len = traj.len();
    let n = params.n();
    let mut out = FilterResult {
        loglik: 0.0,
        pred_means: Vec::with_capacity(t_len),
        filtered_means: Vec::with_capacity(t_len),
        filtered_covs: Vec::with_capacity(t_len),
        predicted_means: Vec::with_capacity(t_len),
        predicted_covs: Vec::with_capacity(t_len),
    };
    let eye = Mat::identity(n, n);
    let mut mean = prior.mean.clone();
    let mut cov = symmetrize(&prior.cov);
    for t in 0..t_len {
        let ut = traj.u.row(t).transpose();
        let yt = traj.y.row(t).transpose();
        if t == 0 {
            let yhat = &params.d * &ut;
            let inn = innovation(&(&yt - &yhat), params.r.clone(), 0)?;
            out.loglik += inn.loglik;
            out.pred_means.push(yhat);
            out.predicted_means.push(mean.clone());
            out.predicted_covs.push(cov.clone());
            out.filtered_means.push(mean.clone());
            out.filtered_covs.push(cov.clone());
            continue;
        }
        let uprev = traj.u.row(t - 1).transpose();
        let pmean = &params.a * &mean + &params.b * uprev;
        let pcov = symmetrize(&(&params.a * &cov * params.a.transpose() + &params.q));
        let yhat = &params.c * &pmean + &params.d * &ut;
        let pct = &pcov * params.c.transpose();
        let s = &params.c * &pct + &params.r;
        let err = &yt - &yhat;
        let inn = innovation(&err, s, t)?;
        out.loglik += inn.loglik;
        // K = P Cᵀ S⁻¹
        let gain = inn.chol.solve(&pct.transpose()).transpose();
        mean = &pmean + &pct * &inn.weighted;
        let ikc = &eye - &gain * &params.c;
        cov = symmetrize(&(&ikc * &pcov * ikc.transpose() + &gain * &params.r * gain.transpose()));
        out.pred_means.push(yhat);
        out.predicted_means.push(pmean);
        out.predicted_covs.push(pcov);
        out.filtered_means.push(mean.clone());
        out.filtered_covs.push(cov.clone());
    }
    Ok(out)
}

/// Log-likelihood only; avoids storing the per-step moments.
pub fn kalman_loglik(params: &LdsParams, traj: &Trajectory, prior: &StatePrior) -> Result<f64> {
    check_inputs(params, traj, prior)?;
    let n = params.n();
    let eye = Mat::identity(n, n);
    let mut mean = prior.mean.clone();
    let mut cov = symmetrize(&prior.cov);
    let ct = params.c.transpose();
    let at = params.a.transpose();
    let mut loglik = 0.0;
    for t in 0..traj.len() {
        let ut = traj.u.row(t).transpose();
        let yt = traj.y.row(t).transpose();
        if t == 0 {
            loglik += innovation(&(&yt - &params.d * &ut), params.r.clone(), 0)?.loglik;
            continue;
        }
        let uprev = traj.u.row(t - 1).transpose();
        let pmean = &params.a * &mean + &params.b * uprev;
        let pcov = symmetrize(&(&params.a * &cov * &at + &params.q));
        let pct = &pcov * &ct;
        let s = &params.c * &pct + &params.r;
        let err = &yt - &params.c * &pmean - &params.d * &ut;
        let inn = innovation(&err, s, t)?;
        loglik += inn.loglik;
        let gain = inn.chol.solve(&pct.transpose()).transpose();
        mean = &pmean + &pct * &inn.weighted;
        let ikc = &eye - &gain * &params.c;
        cov = symmetrize(&(&ikc * &pcov * ikc.transpose() + &gain * &params.r * gain.transpose()));
    }
    Ok(loglik)
}

/// Rauch-Tung-Striebel smoother on top of [`kalman_filter`].
pub fn kalman_smoother(params: &LdsParams, traj: &Trajectory, prior: &StatePrior) -> Result<SmootherResult> {
    let filt = kalman_filter(params, traj, prior)?;
    let t_len = traj.len();
    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    let mut cross = vec![Mat::zeros(params.n(), params.n()); t_len.saturating_sub(1)];
    let at = params.a.transpose();
    for t in (1..t_len).rev() {
        // J_{t-1} = V_{t-1} Aᵀ P_t⁻¹
        let va = &filt.filtered_covs[t - 1] * &at;
        let gain = right_solve_spd(&va, &filt.predicted_covs[t])
            .ok_or(MoldsError::FilterDivergence { step: t })?;
        let dm = &means[t] - &filt.predicted_means[t];
        means[t - 1] = &filt.filtered_means[t - 1] + &gain * dm;
        let dv = &covs[t] - &filt.predicted_covs[t];
        covs[t - 1] = symmetrize(&(&filt.filtered_covs[t - 1] + &gain * dv * gain.transpose()));
        cross[t - 1] = &covs[t] * gain.transpose();
    }
    Ok(SmootherResult {
        loglik: filt.loglik,
        means,
        covs,
        cross,
    })
}

/// Smoothed second-moment blocks feeding the closed-form M-step.
///
/// Emission blocks (`s_yx`, `s_xx`, `s_xu`) sum over `t = 1..T-1`, while
/// `s_yy`, `s_yu`, `s_uu` also include the stateless first output, so
/// `t_count = T`. Transition blocks sum over the `T - 1` pairs `(x_{t-1}, x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub s_yy: Mat,
    pub s_yx: Mat,
    pub s_xx: Mat,
    pub s_xx_curr: Mat,
    /// `Σ E[x_t x_{t-1}ᵀ]`
    pub s_xxm: Mat,
    /// `Σ E[x_t] u_{t-1}ᵀ`
    pub s_xum: Mat,
    pub s_xmxm: Mat,
    pub s_umxm: Mat,
    pub s_umum: Mat,
    /// `Σ y_t u_tᵀ` over all emission steps (feedthrough regression).
    pub s_yu: Mat,
    /// `Σ E[x_t] u_tᵀ` over state-bearing emission steps.
    pub s_xu: Mat,
    pub s_uu: Mat,
    /// `E[x_0 x_0ᵀ]`
    pub s_x0x0: Mat,
    pub t_count: f64,
    pub n_count: f64,
}

impl SuffStats {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        SuffStats {
            s_yy: Mat::zeros(p, p),
            s_yx: Mat::zeros(p, n),
            s_xx: Mat::zeros(n, n),
            s_xx_curr: Mat::zeros(n, n),
            s_xxm: Mat::zeros(n, n),
            s_xum: Mat::zeros(n, m),
            s_xmxm: Mat::zeros(n, n),
            s_umxm: Mat::zeros(m, n),
            s_umum: Mat::zeros(m, m),
            s_yu: Mat::zeros(p, m),
            s_xu: Mat::zeros(n, m),
            s_uu: Mat::zeros(m, m),
            s_x0x0: Mat::zeros(n, n),
            t_count: 0.0,
            n_count: 0.0,
        }
    }

    fn fields_mut(&mut self) -> [&mut Mat; 13] {
        [
            &mut self.s_yy,
            &mut self.s_yx,
            &mut self.s_xx,
            &mut self.s_xx_curr,
            &mut self.s_xxm,
            &mut self.s_xum,
            &mut self.s_xmxm,
            &mut self.s_umxm,
            &mut self.s_umum,
            &mut self.s_yu,
            &mut self.s_xu,
            &mut self.s_uu,
            &mut self.s_x0x0,
        ]
    }

    fn fields(&self) -> [&Mat; 13] {
        [
            &self.s_yy,
            &self.s_yx,
            &self.s_xx,
            &self.s_xx_curr,
            &self.s_xxm,
            &self.s_xum,
            &self.s_xmxm,
            &self.s_umxm,
            &self.s_umum,
            &self.s_yu,
            &self.s_xu,
            &self.s_uu,
            &self.s_x0x0,
        ]
    }

    /// `self += weight · other`, fieldwise.
    pub fn add_scaled(&mut self, other: &SuffStats, weight: f64) {
        let src = other.fields();
        for (dst, s) in self.fields_mut().into_iter().zip(src) {
            *dst += s * weight;
        }
        self.t_count += weight * other.t_count;
        self.n_count += weight * other.n_count;
    }

    pub fn scaled(&self, weight: f64) -> SuffStats {
        let mut out = self.clone();
        for f in out.fields_mut() {
            *f *= weight;
        }
        out.t_count *= weight;
        out.n_count *= weight;
        out
    }
}

/// Exact smoothed expectations of the EM sufficient statistics for one trial.
pub fn suff_stats(smoother: &SmootherResult, traj: &Trajectory) -> Result<SuffStats> {
    let t_len = traj.len();
    if smoother.means.len() != t_len {
        return Err(MoldsError::dim("smoother length", t_len, smoother.means.len()));
    }
    let n = smoother.means.first().map_or(0, |m| m.len());
    let (m, p) = (traj.m(), traj.p());
    let mut st = SuffStats::zeros(n, m, p);
    for t in 0..t_len {
        let y = traj.y.row(t).transpose();
        let u = traj.u.row(t).transpose();
        st.s_yy += &y * y.transpose();
        st.s_yu += &y * u.transpose();
        st.s_uu += &u * u.transpose();
        if t == 0 {
            st.s_x0x0 = &smoother.means[0] * smoother.means[0].transpose() + &smoother.covs[0];
            continue;
        }
        let x = &smoother.means[t];
        let xx = x * x.transpose() + &smoother.covs[t];
        st.s_yx += &y * x.transpose();
        st.s_xu += x * u.transpose();
        st.s_xx += &xx;
        st.s_xx_curr += &xx;

        let xm = &smoother.means[t - 1];
        let um = traj.u.row(t - 1).transpose();
        st.s_xxm += x * xm.transpose() + &smoother.cross[t - 1];
        st.s_xum += x * um.transpose();
        st.s_xmxm += xm * xm.transpose() + &smoother.covs[t - 1];
        st.s_umxm += &um * xm.transpose();
        st.s_umum += &um * um.transpose();
    }
    st.t_count = t_len as f64;
    st.n_count = (t_len - 1) as f64;
    Ok(st)
}

/// RMSE of the one-step output predictions over all `T·p` entries.
pub fn one_step_rmse(params: &LdsParams, traj: &Trajectory, prior: &StatePrior) -> Result<f64> {
    let filt = kalman_filter(params, traj, prior)?;
    Ok(prediction_rmse(&filt, traj))
}

pub(crate) fn prediction_sse(filt: &FilterResult, traj: &Trajectory) -> f64 {
    filt.pred_means
        .iter()
        .enumerate()
        .map(|(t, yhat)| (traj.y.row(t).transpose() - yhat).norm_squared())
        .sum()
}

pub(crate) fn prediction_rmse(filt: &FilterResult, traj: &Trajectory) -> f64 {
    (prediction_sse(filt, traj) / (traj.len() * traj.p()) as f64).sqrt()
}
