//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `M - Mᵀ`.
pub fn asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sym_eig_desc(m: &Mat) -> (Vector, Mat) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Nearest positive semidefinite matrix in Frobenius norm: `U max(Λ, 0) Uᵀ`.
pub fn psd_project(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let u = &eig.eigenvectors;
    symmetrize(&(u * Mat::from_diagonal(&clipped) * u.transpose()))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Thin SVD `M = U diag(σ) Vᵀ`, singular values descending.
///
/// Computed from the symmetric eigendecomposition of `[[0, M], [Mᵀ, 0]]`,
/// whose eigenpairs are `±σ_i` with eigenvectors `(u_i, ±v_i)/√2`.
/// nalgebra's bidiagonal SVD loses accuracy on some small Hankel matrices.
pub struct ThinSvd {
    pub u: Mat,
    pub singular_values: Vec<f64>,
    pub v: Mat,
}

pub fn thin_svd(m: &Mat) -> ThinSvd {
    let (r, c) = m.shape();
    let k = r.min(c);
    let mut aug = Mat::zeros(r + c, r + c);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let (vals, vecs) = sym_eig_desc(&aug);
    let mut u = Mat::zeros(r, k);
    let mut v = Mat::zeros(c, k);
    let mut sv = Vec::with_capacity(k);
    for i in 0..k {
        let x = vecs.view((0, i), (r, 1)).into_owned();
        let y = vecs.view((r, i), (c, 1)).into_owned();
        let (nx, ny) = (x.norm(), y.norm());
        if nx > 1e-8 && ny > 1e-8 {
            u.set_column(i, &(x / nx).column(0));
            v.set_column(i, &(y / ny).column(0));
        }
        sv.push(vals[i].max(0.0));
    }
    ThinSvd {
        u,
        singular_values: sv,
        v,
    }
}

/// Largest over smallest singular value; infinite when singular.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = thin_svd(m).singular_values;
    let max = sv.first().copied().unwrap_or(0.0);
    let min = sv.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Moore-Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pinv(m: &Mat) -> Mat {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Mat::zeros(m.ncols(), m.nrows());
    }
    let svd = thin_svd(m);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = smax * 1e-13 * (m.nrows().max(m.ncols()) as f64);
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += svd.v.column(k) * svd.u.column(k).transpose() / s;
        }
    }
    out
}

/// Solves `X · G = RHS` for a symmetric positive (semi)definite `G`.
/// Falls back to the pseudo-inverse when Cholesky fails.
pub fn right_solve_spd(rhs: &Mat, g: &Mat) -> Option<Mat> {
    match g.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs.transpose()).transpose()),
        None => {
            let p = pinv(g);
            let out = rhs * p;
            out.iter().all(|v| v.is_finite()).then_some(out)
        }
    }
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vector {
    loop {
        let v = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nrm = v.norm();
        if nrm > 1e-12 {
            return v / nrm;
        }
    }
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Mat {
    let g = standard_normal_matrix(rng, dim, dim);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Numerically stable log-sum-exp; returns -inf when every entry is -inf.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psd_projection_clips_negative_eigenvalues() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -2.0]));
        let p = psd_project(&m);
        assert!((p - Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]))).norm() < 1e-14);
    }

    #[test]
    fn sym_eig_sorted_descending() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 4.0, -3.0]));
        let (vals, vecs) = sym_eig_desc(&m);
        assert_eq!(vals.as_slice(), &[4.0, 1.0, -3.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthogonal(&mut rng, 5);
        assert!((q.transpose() * &q - Mat::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, f64::NEG_INFINITY]) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn thin_svd_reconstructs_hankel() {
        // nalgebra's own SVD misses this one by ~5e-5
        let h = Mat::from_row_slice(
            4,
            3,
            &[
                -0.15793205151803277, -0.11288874736290555, 0.22964116741578175, -0.11288874736290555, 0.22964116741578175,
                -0.1572048386970195, 0.22964116741578175, -0.1572048386970195, -0.001150422375730445, -0.1572048386970195,
                -0.001150422375730445, 0.11341674775316729,
            ],
        );
        let svd = thin_svd(&h);
        let back = &svd.u * Mat::from_diagonal(&Vector::from_vec(svd.singular_values.clone())) * svd.v.transpose();
        assert!((back - &h).norm() < 1e-14);
        assert!((svd.u.transpose() * &svd.u - Mat::identity(3, 3)).norm() < 1e-13);
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let wide = thin_svd(&h.transpose());
        for (a, b) in wide.singular_values.iter().zip(&svd.singular_values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn pinv_of_rank_one() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pinv(&m);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
    }
}
