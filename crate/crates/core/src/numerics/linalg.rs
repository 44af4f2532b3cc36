//! Small dense linear algebra in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix has {len} entries, expected {dim}x{dim}")]
    Shape { len: usize, dim: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorises the symmetric matrix `a + jitter * I` (row-major, `dim x dim`).
    /// Only the lower triangle of `a` is read.
    pub fn factor(a: &[f64], dim: usize, jitter: f64) -> Result<Self, LinalgError> {
        if a.len() != dim * dim {
            return Err(LinalgError::Shape { len: a.len(), dim });
        }
        if a.iter().any(|x| !x.is_finite()) || !jitter.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = a[i * dim + j];
                if i == j {
                    s += jitter;
                }
                for k in 0..j {
                    s -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite { pivot: i, value: s });
                    }
                    l[i * dim + i] = Float::sqrt(s);
                } else {
                    l[i * dim + j] = s / l[j * dim + j];
                }
            }
        }
        Ok(Self { dim, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `A x = b` by forward then backward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        assert_eq!(b.len(), n, "solve: rhs length");
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }

    /// `bᵀ A⁻¹ b`, computed as the squared norm of `L⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> f64 {
        let n = self.dim;
        assert_eq!(b.len(), n);
        let l = &self.lower;
        let mut y = b.to_vec();
        let mut total = 0.0;
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
            total += y[i] * y[i];
        }
        total
    }
}
