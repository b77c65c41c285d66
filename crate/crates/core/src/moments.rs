//! Lagged-input regression design, empirical moments `M2`/`M3`, and whitening.
//!
//! Each trajectory contributes samples at anchor times `t ∈ {L, 2L, …}` with
//! `t <= T-1`. The covariate stacks the `L` inputs that drive `y_t`,
//! `v = [u_{t-1}; u_{t-2}; …; u_{t-L}] / σ_u`, so that `⟨σ_u g^{(L)}, v⟩` is the
//! noiseless output truncated at lag `L`. Anchors `L` apart use disjoint
//! input windows.

use crate::error::{MoldsError, Result};
use crate::lds::Trajectory;
use crate::linalg::{sym_eig_desc, Mat, Vector};
use crate::tensor::Tensor3;

/// Which moment a sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    M2,
    M3,
}

/// One regression sample `(v, ỹ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrSample {
    pub v: Vector,
    pub y: f64,
    pub trial_id: String,
    pub split: Split,
}

/// How a (possibly multi-channel) output is reduced to a scalar response.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputProjection {
    Channel(usize),
    Direction(Vector),
}

impl OutputProjection {
    fn apply(&self, y: &Mat, t: usize) -> Result<f64> {
        match self {
            OutputProjection::Channel(c) => {
                if *c >= y.ncols() {
                    return Err(MoldsError::dim("output channel", format!("< {}", y.ncols()), c));
                }
                Ok(y[(t, *c)])
            }
            OutputProjection::Direction(w) => {
                if w.len() != y.ncols() {
                    return Err(MoldsError::dim("output projection", y.ncols(), w.len()));
                }
                Ok(y.row(t).transpose().dot(w))
            }
        }
    }
}

/// Samples plus the input scale they were normalized by.
#[derive(Debug, Clone)]
pub struct LaggedDesign {
    pub samples: Vec<MlrSample>,
    pub sigma_u: f64,
    pub lag: usize,
    /// Trials shorter than `L + 1`.
    pub skipped: Vec<String>,
}

impl LaggedDesign {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.v.len())
    }
}

/// Stacks `[u_{t-1}; …; u_{t-L}]` (unnormalized).
pub(crate) fn lagged_inputs(u: &Mat, t: usize, lag: usize) -> Vector {
    let m = u.ncols();
    let mut v = Vector::zeros(lag * m);
    for j in 1..=lag {
        for c in 0..m {
            v[(j - 1) * m + c] = u[(t - j, c)];
        }
    }
    v
}

/// Builds the stride-`L` regression design.
///
/// `σ_u²` is the per-coordinate second moment of the inputs entering any
/// sample, so that `E[v vᵀ] = I` for white inputs of any width.
pub fn build_lagged_design(
    trajs: &[Trajectory],
    lag: usize,
    proj: &OutputProjection,
) -> Result<LaggedDesign> {
    if lag == 0 {
        return Err(MoldsError::invalid("L", "must be at least 1"));
    }
    let m = trajs.first().map_or(0, |t| t.m());
    let mut skipped = Vec::new();
    let mut raw: Vec<(Vector, f64, &str)> = Vec::new();
    let mut sq_sum = 0.0;
    let mut sq_count = 0usize;
    for tr in trajs {
        if tr.m() != m {
            return Err(MoldsError::dim("U columns", m, tr.m()));
        }
        if tr.len() < lag + 1 {
            log::warn!("trial {:?} shorter than L+1 = {}; skipped", tr.trial_id, lag + 1);
            skipped.push(tr.trial_id.clone());
            continue;
        }
        let mut t = lag;
        while t < tr.len() {
            let v = lagged_inputs(&tr.u, t, lag);
            sq_sum += v.norm_squared();
            sq_count += lag * m;
            raw.push((v, proj.apply(&tr.y, t)?, &tr.trial_id));
            t += lag;
        }
    }
    if raw.is_empty() {
        return Err(MoldsError::EmptyPartition("no trajectory has T >= L+1"));
    }
    let sigma_u = (sq_sum / sq_count as f64).sqrt();
    if !(sigma_u > 0.0) || !sigma_u.is_finite() {
        return Err(MoldsError::DegenerateInputs);
    }
    let samples = raw
        .into_iter()
        .enumerate()
        .map(|(j, (v, y, id))| MlrSample {
            v: v / sigma_u,
            y,
            trial_id: id.to_string(),
            split: if j % 2 == 0 { Split::M2 } else { Split::M3 },
        })
        .collect();
    Ok(LaggedDesign {
        samples,
        sigma_u,
        lag,
        skipped,
    })
}

/// Empirical second- and third-order moments.
#[derive(Debug, Clone)]
pub struct MomentEstimates {
    pub m2: Mat,
    pub m3: Tensor3,
    pub sigma_u: f64,
    pub n2: usize,
    pub n3: usize,
}

/// `M2 = (1/2|N2|) Σ ỹ² (v vᵀ − I)` and `M3 = (1/6|N3|) Σ ỹ³ (v^{⊗3} − 𝓔(v))`.
pub fn estimate_moments(samples: &[MlrSample], sigma_u: f64) -> Result<MomentEstimates> {
    let d = samples.first().map_or(0, |s| s.v.len());
    if d == 0 {
        return Err(MoldsError::EmptyPartition("no samples"));
    }
    let mut m2 = Mat::zeros(d, d);
    let mut y2_sum = 0.0;
    let mut n2 = 0usize;
    // upper simplex i <= j <= k of Σ ỹ³ v⊗v⊗v, filled symmetrically afterwards
    let mut cube = Tensor3::zeros(d);
    let mut first_order = Vector::zeros(d);
    let mut n3 = 0usize;
    for s in samples {
        if s.v.len() != d {
            return Err(MoldsError::dim("sample dimension", d, s.v.len()));
        }
        match s.split {
            Split::M2 => {
                let y2 = s.y * s.y;
                m2.ger(y2, &s.v, &s.v, 1.0);
                y2_sum += y2;
                n2 += 1;
            }
            Split::M3 => {
                let y3 = s.y * s.y * s.y;
                first_order.axpy(y3, &s.v, 1.0);
                for i in 0..d {
                    let a = y3 * s.v[i];
                    for j in i..d {
                        let b = a * s.v[j];
                        for k in j..d {
                            let idx = cube.get(i, j, k) + b * s.v[k];
                            cube.set(i, j, k, idx);
                        }
                    }
                }
                n3 += 1;
            }
        }
    }
    if n2 == 0 {
        return Err(MoldsError::EmptyPartition("N2"));
    }
    if n3 == 0 {
        return Err(MoldsError::EmptyPartition("N3"));
    }
    for i in 0..d {
        m2[(i, i)] -= y2_sum;
    }
    m2 /= 2.0 * n2 as f64;
    for i in 0..d {
        for j in i..d {
            for k in j..d {
                let v = cube.get(i, j, k);
                for (a, b, c) in [(i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                    cube.set(a, b, c, v);
                }
            }
        }
    }
    // 𝓔 is linear, so Σ ỹ³ 𝓔(v) = 𝓔(Σ ỹ³ v)
    for r in 0..d {
        for i in 0..d {
            let s = first_order[i];
            cube.set(i, r, r, cube.get(i, r, r) - s);
            cube.set(r, i, r, cube.get(r, i, r) - s);
            cube.set(r, r, i, cube.get(r, r, i) - s);
        }
    }
    cube.scale(1.0 / (6.0 * n3 as f64));
    // exact symmetry of M2
    let m2 = (&m2 + m2.transpose()) * 0.5;
    Ok(MomentEstimates {
        m2,
        m3: cube,
        sigma_u,
        n2,
        n3,
    })
}

/// Whitening map with `Wᵀ M2 W ≈ I_K`.
#[derive(Debug, Clone)]
pub struct Whitener {
    /// `d×K`
    pub w: Mat,
    /// Top-`K` eigenvalues of `M2`, descending.
    pub eigvals: Vec<f64>,
    /// Matching eigenvectors (`d×K`).
    pub eigvecs: Mat,
    /// `‖Wᵀ M2 W − I‖_F`.
    pub residual: f64,
}

impl Whitener {
    /// `(Wᵀ)⁺ = U Σ^{1/2}`.
    pub fn unwhitening(&self) -> Mat {
        let sq = Vector::from_iterator(self.eigvals.len(), self.eigvals.iter().map(|v| v.sqrt()));
        &self.eigvecs * Mat::from_diagonal(&sq)
    }
}

/// Rank-`K` whitening `W = U_{:,1:K} Σ_{1:K}^{-1/2}`.
pub fn compute_whitener(m2: &Mat, k: usize) -> Result<Whitener> {
    let d = m2.nrows();
    if k == 0 {
        return Err(MoldsError::invalid("K", "must be at least 1"));
    }
    let (vals, vecs) = sym_eig_desc(m2);
    if k > d {
        return Err(MoldsError::RankDeficient {
            k,
            spectrum: vals.iter().copied().collect(),
        });
    }
    let top = vals[0].abs().max(f64::MIN_POSITIVE);
    if vals.iter().take(k).any(|&v| v <= 1e-10 * top) {
        return Err(MoldsError::RankDeficient {
            k,
            spectrum: vals.iter().copied().collect(),
        });
    }
    let eigvecs = vecs.columns(0, k).into_owned();
    let eigvals: Vec<f64> = vals.iter().take(k).copied().collect();
    let inv_sqrt = Vector::from_iterator(k, eigvals.iter().map(|v| 1.0 / v.sqrt()));
    let w = &eigvecs * Mat::from_diagonal(&inv_sqrt);
    let residual = (w.transpose() * m2 * &w - Mat::identity(k, k)).norm();
    Ok(Whitener {
        w,
        eigvals,
        eigvecs,
        residual,
    })
}

/// `T̂ = M3(W, W, W)`.
pub fn whiten_tensor(m3: &Tensor3, whitener: &Whitener) -> Result<Tensor3> {
    if whitener.w.nrows() != m3.dim() {
        return Err(MoldsError::dim("whitener rows", m3.dim(), whitener.w.nrows()));
    }
    Ok(m3.multilinear(&whitener.w))
}
