//! State-space types, simulation, Markov parameters and Ho-Kalman realization.
//!
//! Timing convention used throughout the crate: the first output carries no
//! state information, and every later output reads the state advanced by the
//! previous input,
//!
//! ```text
//! y_0     = D u_0 + v_0
//! x_t     = A x_{t-1} + B u_{t-1} + w_{t-1}          (t >= 1)
//! y_t     = C x_t + D u_t + v_t                      (t >= 1)
//! ```
//!
//! so that with `D = 0` the noiseless output is `y_t = Σ_j g(j) u_{t-j}` with
//! Markov parameters `g(j) = C A^{j-1} B`. The state prior sits on `x_0`.

use nalgebra::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MoldsError, Result};
use crate::linalg::{asymmetry, min_eigenvalue, symmetrize, thin_svd, Mat, Vector};

/// One LDS component `(A, B, C, D, Q, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsParams {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl LdsParams {
    /// Noise-free system with `D = 0` and zero covariances.
    pub fn noiseless(a: Mat, b: Mat, c: Mat) -> Self {
        let (n, m, p) = (a.nrows(), b.ncols(), c.nrows());
        LdsParams {
            a,
            b,
            c,
            d: Mat::zeros(p, m),
            q: Mat::zeros(n, n),
            r: Mat::zeros(p, p),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Checks mutual dimension consistency, naming the offending field.
    pub fn check_dims(&self) -> Result<()> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        if self.a.ncols() != n {
            return Err(MoldsError::dim("A", format!("{n}x{n}"), shape(&self.a)));
        }
        if self.b.nrows() != n {
            return Err(MoldsError::dim("B", format!("{n}x{m}"), shape(&self.b)));
        }
        if self.c.ncols() != n {
            return Err(MoldsError::dim("C", format!("{p}x{n}"), shape(&self.c)));
        }
        if self.d.shape() != (p, m) {
            return Err(MoldsError::dim("D", format!("{p}x{m}"), shape(&self.d)));
        }
        if self.q.shape() != (n, n) {
            return Err(MoldsError::dim("Q", format!("{n}x{n}"), shape(&self.q)));
        }
        if self.r.shape() != (p, p) {
            return Err(MoldsError::dim("R", format!("{p}x{p}"), shape(&self.r)));
        }
        Ok(())
    }

    /// Full validation: dimensions plus symmetric PSD noise covariances.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            if asymmetry(m) > 1e-12 {
                return Err(MoldsError::NotSymmetric(name.into()));
            }
            if m.nrows() > 0 && min_eigenvalue(m) < -1e-10 {
                return Err(MoldsError::invalid("noise covariance", format!("{name} is not PSD")));
            }
        }
        Ok(())
    }

    /// Equivalent realization `(M⁻¹AM, M⁻¹B, CM)`; `Q` is mapped to `M⁻¹QM⁻ᵀ`.
    pub fn similarity(&self, m: &Mat) -> Option<Self> {
        let inv = m.clone().try_inverse()?;
        Some(LdsParams {
            a: &inv * &self.a * m,
            b: &inv * &self.b,
            c: &self.c * m,
            d: self.d.clone(),
            q: symmetrize(&(&inv * &self.q * inv.transpose())),
            r: self.r.clone(),
        })
    }
}

pub(crate) fn shape(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// One trial: inputs `u` (T×m) and outputs `y` (T×p).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: Mat,
    pub y: Mat,
    pub trial_id: String,
}

impl Trajectory {
    pub fn new(u: Mat, y: Mat, trial_id: impl Into<String>) -> Result<Self> {
        let traj = Trajectory {
            u,
            y,
            trial_id: trial_id.into(),
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn m(&self) -> usize {
        self.u.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.nrows() != self.y.nrows() {
            return Err(MoldsError::dim("U rows", self.y.nrows(), self.u.nrows()));
        }
        if self.y.nrows() == 0 {
            return Err(MoldsError::invalid("trajectory", "T must be at least 1"));
        }
        if self.u.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(MoldsError::invalid("trajectory", "non-finite entry"));
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, params: &LdsParams) -> Result<()> {
        if self.m() != params.m() {
            return Err(MoldsError::dim("U columns", params.m(), self.m()));
        }
        if self.p() != params.p() {
            return Err(MoldsError::dim("Y columns", params.p(), self.p()));
        }
        Ok(())
    }
}

/// Mixture weights plus one `LdsParams` per component.
#[derive(Debug, Clone, PartialEq)]
pub struct MoldsModel {
    pub weights: Vec<f64>,
    pub components: Vec<LdsParams>,
}

impl MoldsModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `(n, m, p)` of the first component.
    pub fn dims(&self) -> (usize, usize, usize) {
        let c = &self.components[0];
        (c.n(), c.m(), c.p())
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(MoldsError::invalid("components", "model has no components"));
        }
        if self.weights.len() != self.components.len() {
            return Err(MoldsError::dim("weights", self.components.len(), self.weights.len()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MoldsError::invalid("weights", "negative or NaN weight"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(MoldsError::invalid("weights", format!("sum to {total}, not 1")));
        }
        let dims = self.dims();
        for comp in &self.components {
            comp.validate()?;
            if (comp.n(), comp.m(), comp.p()) != dims {
                return Err(MoldsError::dim(
                    "components",
                    format!("{dims:?}"),
                    format!("{:?}", (comp.n(), comp.m(), comp.p())),
                ));
            }
        }
        Ok(())
    }
}

/// Impulse response blocks, `blocks[j-1] = C A^{j-1} B` (each p×m).
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSeq {
    pub blocks: Vec<Mat>,
}

impl MarkovSeq {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn p(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn m(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.ncols())
    }

    /// Concatenation of the blocks, each flattened row-major. For a scalar
    /// output this is the regression vector `[g(1); g(2); …; g(L)]`.
    pub fn flatten(&self) -> Vector {
        let mut out = Vec::with_capacity(self.len() * self.p() * self.m());
        for b in &self.blocks {
            for r in 0..b.nrows() {
                out.extend(b.row(r).iter());
            }
        }
        Vector::from_vec(out)
    }

    /// Inverse of [`MarkovSeq::flatten`].
    pub fn from_flat(flat: &[f64], p: usize, m: usize) -> Result<Self> {
        let block = p * m;
        if block == 0 || !flat.len().is_multiple_of(block) {
            return Err(MoldsError::dim("markov_flat", format!("multiple of {block}"), flat.len()));
        }
        let blocks = flat
            .chunks(block)
            .map(|c| Mat::from_row_slice(p, m, c))
            .collect();
        Ok(MarkovSeq { blocks })
    }

    pub fn frobenius(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }
}

fn noise_factor(cov: &Mat) -> Mat {
    // symmetric square root; tolerates singular PSD covariances
    let eig = nalgebra::SymmetricEigen::new(symmetrize(cov));
    let sq = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&sq)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, factor: &Mat) -> Vector {
    let z = Vector::from_fn(factor.ncols(), |_, _| rng.sample(StandardNormal));
    factor * z
}

/// Simulates one trajectory driven by `u` from initial state `x0`.
pub fn simulate_lds<R: Rng + ?Sized>(
    params: &LdsParams,
    u: &Mat,
    x0: &Vector,
    rng: &mut R,
) -> Result<Trajectory> {
    params.check_dims()?;
    let (n, m, p) = (params.n(), params.m(), params.p());
    if u.ncols() != m {
        return Err(MoldsError::dim("U", format!("T x {m}"), shape(u)));
    }
    if x0.len() != n {
        return Err(MoldsError::dim("x0", n, x0.len()));
    }
    let t_len = u.nrows();
    if t_len == 0 {
        return Err(MoldsError::invalid("U", "T must be at least 1"));
    }
    let qf = noise_factor(&params.q);
    let rf = noise_factor(&params.r);
    let mut y = Mat::zeros(t_len, p);
    let mut x = x0.clone();
    for t in 0..t_len {
        let ut = u.row(t).transpose();
        if t > 0 {
            let uprev = u.row(t - 1).transpose();
            x = &params.a * &x + &params.b * uprev + gaussian(rng, &qf);
        }
        let mut yt = &params.d * &ut + gaussian(rng, &rf);
        if t > 0 {
            yt += &params.c * &x;
        }
        y.set_row(t, &yt.transpose());
    }
    Ok(Trajectory {
        u: u.clone(),
        y,
        trial_id: String::new(),
    })
}

/// First `len` Markov parameters `C A^{j-1} B`.
pub fn markov_params(params: &LdsParams, len: usize) -> Result<MarkovSeq> {
    if len == 0 {
        return Err(MoldsError::invalid("L", "must be at least 1"));
    }
    params.check_dims()?;
    let mut blocks = Vec::with_capacity(len);
    let mut ab = params.b.clone();
    for _ in 0..len {
        blocks.push(&params.c * &ab);
        ab = &params.a * ab;
    }
    Ok(MarkovSeq { blocks })
}

fn hankel_from(g: &MarkovSeq, offset: usize, rows: usize, cols: usize) -> Mat {
    let (p, m) = (g.p(), g.m());
    let mut h = Mat::zeros(rows * p, cols * m);
    for i in 0..rows {
        for j in 0..cols {
            h.view_mut((i * p, j * m), (p, m))
                .copy_from(&g.blocks[i + j + offset]);
        }
    }
    h
}

/// Block Hankel matrix whose (i, j) block (1-indexed) is `g(i+j-1)`.
pub fn build_hankel(g: &MarkovSeq, block_rows: usize, block_cols: usize) -> Result<Mat> {
    if block_rows == 0 || block_cols == 0 {
        return Err(MoldsError::invalid("hankel", "block counts must be positive"));
    }
    let required = block_rows + block_cols - 1;
    if required > g.len() {
        return Err(MoldsError::InsufficientMarkov {
            required,
            available: g.len(),
        });
    }
    Ok(hankel_from(g, 0, block_rows, block_cols))
}

/// Output of [`ho_kalman_realize`].
#[derive(Debug, Clone)]
pub struct Realization {
    /// `(A, B, C)` with `D = 0` and zero noise covariances.
    pub params: LdsParams,
    pub singular_values: Vec<f64>,
    /// Set when the Hankel matrix has numerical rank below the requested order.
    pub rank_deficient: bool,
}

/// Balanced Ho-Kalman realization of order `n` from Markov parameters.
pub fn ho_kalman_realize(g: &MarkovSeq, n: usize) -> Result<Realization> {
    if n == 0 {
        return Err(MoldsError::invalid("n", "model order must be at least 1"));
    }
    let len = g.len();
    if len < 2 {
        return Err(MoldsError::InsufficientMarkov {
            required: 2,
            available: len,
        });
    }
    let (p, m) = (g.p(), g.m());
    let d1 = len.div_ceil(2);
    let d2 = len - d1;
    // H uses g(1..L-1), the shifted Hankel uses g(2..L)
    let h = hankel_from(g, 0, d1, d2);
    let h_shift = hankel_from(g, 1, d1, d2);
    if n > h.nrows().min(h.ncols()) {
        return Err(MoldsError::invalid(
            "n",
            format!(
                "order {n} exceeds Hankel dimension {}x{}; increase L",
                h.nrows(),
                h.ncols()
            ),
        ));
    }
    let svd = thin_svd(&h);
    let sv = svd.singular_values.clone();
    let smax = sv.first().copied().unwrap_or(0.0);
    let cutoff = smax * 1e-12;
    let rank_deficient = sv[n - 1] <= cutoff || smax == 0.0;
    if rank_deficient {
        log::warn!("Hankel numerical rank below requested order {n}; singular values {sv:?}");
    }

    let mut obs = Mat::zeros(d1 * p, n);
    let mut ctrb = Mat::zeros(n, d2 * m);
    let mut inv_sqrt = Vec::with_capacity(n);
    for (i, &s) in sv.iter().take(n).enumerate() {
        let sq = s.sqrt();
        obs.set_column(i, &(svd.u.column(i) * sq));
        ctrb.set_row(i, &(svd.v.column(i).transpose() * sq));
        inv_sqrt.push(if s > cutoff && s > 0.0 { 1.0 / sq } else { 0.0 });
    }
    // A = O⁺ H_shift Γ⁺ = Σ^{-1/2} Uᵀ H_shift V Σ^{-1/2}
    let mut a = Mat::zeros(n, n);
    let mut left = Mat::zeros(n, d1 * p);
    let mut right = Mat::zeros(d2 * m, n);
    for i in 0..n {
        left.set_row(i, &(svd.u.column(i).transpose() * inv_sqrt[i]));
        right.set_column(i, &(svd.v.column(i) * inv_sqrt[i]));
    }
    a += left * h_shift * right;
    let c = obs.rows(0, p).into_owned();
    let b = ctrb.columns(0, m).into_owned();
    Ok(Realization {
        params: LdsParams::noiseless(a, b, c),
        singular_values: sv,
        rank_deficient,
    })
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z: &Complex<f64>| z.norm())
        .fold(0.0, f64::max)
}
