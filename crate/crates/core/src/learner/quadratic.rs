//! Per-sample loss `f(w, x) = 1/2 (w - x)^T A (w - x)` with a shared
//! symmetric positive-definite curvature `A`.
//!
//! Smoothness `l = lambda_max(A)` and strong convexity `mu = lambda_min(A)`
//! are exact, which makes this the fixture for every bound check.

use super::{Dataset, LearnerError, Shard};
use crate::vector::{dot, norm_sq};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    dim: usize,
    /// Row-major `dim x dim`.
    curvature: Vec<f64>,
    eigenvalues: Vec<f64>,
    init_scale: f64,
}

impl QuadraticModel {
    pub fn new(dim: usize, curvature: Vec<f64>) -> Result<Self, LearnerError> {
        if dim == 0 || curvature.len() != dim * dim {
            return Err(LearnerError::DimensionMismatch { expected: dim * dim, got: curvature.len() });
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (curvature[i * dim + j], curvature[j * dim + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(LearnerError::InvalidModel("curvature matrix is not symmetric".into()));
                }
            }
        }
        let mut eigenvalues = symmetric_eigenvalues(dim, &curvature);
        eigenvalues.sort_by(f64::total_cmp);
        if eigenvalues[0] <= 0.0 {
            return Err(LearnerError::InvalidModel(format!(
                "curvature matrix is not positive definite (lambda_min = {})",
                eigenvalues[0]
            )));
        }
        Ok(Self { dim, curvature, eigenvalues, init_scale: 1.0 })
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self::new(dim, a).expect("identity is positive definite")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self, LearnerError> {
        let dim = diag.len();
        let mut a = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            a[i * dim + i] = *d;
        }
        Self::new(dim, a)
    }

    /// Standard deviation of the random initial model entries.
    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    /// Ascending eigenvalues of `A`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn smoothness(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    pub fn strong_convexity(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `A v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.curvature.chunks(self.dim).map(|row| dot(row, v)).collect()
    }

    /// `1/2 v^T A v`
    pub fn half_quad_form(&self, v: &[f64]) -> f64 {
        0.5 * dot(v, &self.apply(v))
    }
}

impl QuadraticModel {
    fn mean_point(&self, data: &Dataset, indices: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for &i in indices {
            for (m, x) in mean.iter_mut().zip(data.feature(i)) {
                *m += x;
            }
        }
        let inv = 1.0 / indices.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    /// Minimizer and minimum of the mean loss over `indices`: the sample
    /// mean `x_bar` and `1/2 mean (x - x_bar)^T A (x - x_bar)`.
    pub fn optimum(&self, data: &Dataset, indices: &[usize]) -> (Vec<f64>, f64) {
        let mean = self.mean_point(data, indices);
        let mut f = 0.0;
        let mut d = vec![0.0; self.dim];
        for &i in indices {
            for ((dk, x), m) in d.iter_mut().zip(data.feature(i)).zip(&mean) {
                *dk = x - m;
            }
            f += self.half_quad_form(&d);
        }
        (mean, f / indices.len().max(1) as f64)
    }

    /// Exact per-sample gradient variance on a shard,
    /// `mean ||A (x - x_bar_n)||^2`, which does not depend on `w`.
    pub fn shard_gradient_variance(&self, shard: &Shard<'_>) -> f64 {
        let mean = self.mean_point(shard.data, shard.indices);
        let mut d = vec![0.0; self.dim];
        let mut total = 0.0;
        for &i in shard.indices {
            for ((dk, x), m) in d.iter_mut().zip(shard.data.feature(i)).zip(&mean) {
                *dk = x - m;
            }
            total += norm_sq(&self.apply(&d));
        }
        total / shard.len().max(1) as f64
    }
}

/// Cyclic Jacobi rotations; adequate for the small matrices used here.
pub(crate) fn symmetric_eigenvalues(dim: usize, matrix: &[f64]) -> Vec<f64> {
    let mut a = matrix.to_vec();
    let idx = |i: usize, j: usize| i * dim + j;
    for _sweep in 0..100 {
        let off: f64 = (0..dim)
            .flat_map(|i| (0..dim).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[idx(i, j)] * a[idx(i, j)])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..dim {
            for q in p + 1..dim {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[idx(q, q)] - a[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..dim).map(|i| a[idx(i, i)]).collect()
}
