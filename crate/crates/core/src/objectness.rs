//! Probabilistic objectness: a Gaussian over matched query embeddings,
//! tracked by exponential moving average and scored by Mahalanobis distance.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::linalg::{Cholesky, LinalgError};
use crate::numerics::{Graph, Real, Var};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ObjectnessError {
    #[error("embeddings contain non-finite values")]
    NonFinite,
    #[error("embedding width {found} does not match statistics dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("covariance factorisation failed after regularisation: {0}")]
    Factorisation(LinalgError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub momentum: f64,
    /// Added to the diagonal before every factorisation.
    pub eps: f64,
    pub step_count: u64,
    /// Ignore off-diagonal covariance entries when scoring.
    #[serde(default)]
    pub diagonal: bool,
}

impl GaussianStats {
    /// Zero mean, identity covariance, no updates yet.
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        Self {
            mean: vec![0.0; dim],
            cov,
            momentum,
            eps,
            step_count: 0,
            diagonal: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_initialised(&self) -> bool {
        self.step_count > 0
    }

    /// Cholesky factor of `Σ + eps I`.
    pub fn factor(&self) -> Result<Cholesky, ObjectnessError> {
        let d = self.dim();
        if self.diagonal {
            let mut diag = vec![0.0; d * d];
            for i in 0..d {
                diag[i * d + i] = self.cov[i * d + i];
            }
            Cholesky::factor(&diag, d, self.eps)
        } else {
            Cholesky::factor(&self.cov, d, self.eps)
        }
        .map_err(ObjectnessError::Factorisation)
    }
}

/// Batch mean and biased (`1/m`) covariance of `m` rows of width `d`.
pub fn batch_moments(rows: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let m = if d == 0 { 0 } else { rows.len() / d };
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (a, &x) in mean.iter_mut().zip(r) {
            *a += x;
        }
    }
    for a in mean.iter_mut() {
        *a /= m as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in rows.chunks(d) {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] / m as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

/// One EMA step on `m` matched embeddings (`rows` is `m x d`). Batches with
/// fewer than two rows leave the statistics untouched; the first applied
/// update overwrites them.
pub fn ema_update(stats: &GaussianStats, rows: &[f64]) -> Result<GaussianStats, ObjectnessError> {
    let d = stats.dim();
    if d == 0 || rows.len() % d != 0 {
        return Err(ObjectnessError::Dimension {
            expected: d,
            found: rows.len(),
        });
    }
    if rows.iter().any(|x| !x.is_finite()) {
        return Err(ObjectnessError::NonFinite);
    }
    let m = rows.len() / d;
    if m < 2 {
        return Ok(stats.clone());
    }
    let (bm, bc) = batch_moments(rows, d);
    let mut out = stats.clone();
    if stats.step_count == 0 {
        out.mean = bm;
        out.cov = bc;
    } else {
        let r = stats.momentum;
        for (a, b) in out.mean.iter_mut().zip(&bm) {
            *a = (1.0 - r) * *a + r * b;
        }
        for (a, b) in out.cov.iter_mut().zip(&bc) {
            *a = (1.0 - r) * *a + r * b;
        }
    }
    out.step_count += 1;
    Ok(out)
}

/// `(q - μ)ᵀ (Σ + εI)⁻¹ (q - μ)` against a precomputed factor.
pub fn mahalanobis_sq_with(stats: &GaussianStats, factor: &Cholesky, q: &[f64]) -> f64 {
    let diff: Vec<f64> = q.iter().zip(&stats.mean).map(|(a, b)| a - b).collect();
    factor.quad_form(&diff).max(0.0)
}

pub fn mahalanobis_sq(stats: &GaussianStats, q: &[f64]) -> Result<f64, ObjectnessError> {
    if q.len() != stats.dim() {
        return Err(ObjectnessError::Dimension {
            expected: stats.dim(),
            found: q.len(),
        });
    }
    let f = stats.factor()?;
    Ok(mahalanobis_sq_with(stats, &f, q))
}

/// `exp(-d²)`.
#[inline]
pub fn objectness_from_distance(d2: f64) -> f64 {
    num_traits::Float::exp(-d2)
}

pub fn objectness_score(stats: &GaussianStats, q: &[f64]) -> Result<f64, ObjectnessError> {
    mahalanobis_sq(stats, q).map(objectness_from_distance)
}

/// Sum of squared Mahalanobis distances of the rows of `embeddings`
/// (`m x d`, possibly `m = 0`). Statistics are constants on the graph.
pub fn objectness_loss<T: Real>(g: &mut Graph<T>, embeddings: Var, stats: &GaussianStats, factor: &Cholesky) -> Var {
    let d2 = g.mahalanobis_sq(embeddings, &stats.mean, factor);
    g.sum(d2)
}

/// `p(c | q) = p(c | o, q) · p(o | q)`, entrywise.
pub fn factorized_class_prob(class_probs: &[f64], obj: f64) -> Vec<f64> {
    class_probs.iter().map(|p| p * obj).collect()
}
