//! Dense cubic third-order tensors.

use crate::linalg::{Mat, Vector};

/// Dense `d×d×d` tensor stored with the last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Tensor3 {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    t.data[(i * dim + j) * dim + k] = f(i, j, k);
                }
            }
        }
        t
    }

    /// `Σ_k weights[k] · vecs[k]^{⊗3}`.
    pub fn from_rank_one(weights: &[f64], vecs: &[Vector]) -> Self {
        let dim = vecs.first().map_or(0, |v| v.len());
        let mut t = Tensor3::zeros(dim);
        for (w, v) in weights.iter().zip(vecs) {
            t.add_rank_one(*w, v);
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.dim + j) * self.dim + k] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `self += w · v^{⊗3}`.
    pub fn add_rank_one(&mut self, w: f64, v: &Vector) {
        let d = self.dim;
        for i in 0..d {
            let wi = w * v[i];
            for j in 0..d {
                let wij = wi * v[j];
                let row = &mut self.data[(i * d + j) * d..(i * d + j + 1) * d];
                for (dst, vk) in row.iter_mut().zip(v.iter()) {
                    *dst += wij * vk;
                }
            }
        }
    }

    /// Slice contraction `T(I, I, w) = Σ_r w_r T[:, :, r]`.
    pub fn contract_last(&self, w: &Vector) -> Mat {
        let d = self.dim;
        Mat::from_fn(d, d, |i, j| {
            let row = &self.data[(i * d + j) * d..(i * d + j + 1) * d];
            row.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
        })
    }

    /// `T(I, u, u)`.
    pub fn apply_pair(&self, u: &Vector) -> Vector {
        let d = self.dim;
        Vector::from_fn(d, |i, _| {
            let mut acc = 0.0;
            for j in 0..d {
                let row = &self.data[(i * d + j) * d..(i * d + j + 1) * d];
                let inner: f64 = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                acc += u[j] * inner;
            }
            acc
        })
    }

    /// `T(u, u, u) = ⟨T, u^{⊗3}⟩`.
    pub fn apply_triple(&self, u: &Vector) -> f64 {
        self.apply_pair(u).dot(u)
    }

    /// Multilinear transform `T(W, W, W)` with `W` of shape `d×k`.
    pub fn multilinear(&self, w: &Mat) -> Tensor3 {
        let d = self.dim;
        let k = w.ncols();
        // contract mode 3, then 2, then 1
        let mut t1 = vec![0.0; d * d * k];
        for ij in 0..d * d {
            let row = &self.data[ij * d..(ij + 1) * d];
            for c in 0..k {
                t1[ij * k + c] = row.iter().zip(w.column(c).iter()).map(|(a, b)| a * b).sum();
            }
        }
        let mut t2 = vec![0.0; d * k * k];
        for i in 0..d {
            for j in 0..d {
                for b in 0..k {
                    let wjb = w[(j, b)];
                    if wjb == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        t2[(i * k + b) * k + c] += wjb * t1[(i * d + j) * k + c];
                    }
                }
            }
        }
        let mut out = Tensor3::zeros(k);
        for i in 0..d {
            for a in 0..k {
                let wia = w[(i, a)];
                if wia == 0.0 {
                    continue;
                }
                for bc in 0..k * k {
                    out.data[a * k * k + bc] += wia * t2[i * k * k + bc];
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest deviation between entries related by an index permutation.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let v = self.get(i, j, k);
                    for w in [
                        self.get(i, k, j),
                        self.get(j, i, k),
                        self.get(j, k, i),
                        self.get(k, i, j),
                        self.get(k, j, i),
                    ] {
                        worst = worst.max((v - w).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn sub(&self, other: &Tensor3) -> Tensor3 {
        Tensor3 {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Tensor3) -> Tensor3 {
        Tensor3 {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}
