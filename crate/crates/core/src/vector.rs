//! Dense model and gradient vectors.
//!
//! Both are thin newtypes over `Vec<f64>`; the distinction keeps the PS-side
//! update (model minus scaled gradient) explicit at call sites.

use serde::{Deserialize, Serialize};

/// The shared global model `w`, an `s`-dimensional real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector(Vec<f64>);

/// A (stochastic or full) gradient with the same length as the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(Vec<f64>);

macro_rules! dense_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(entries: Vec<f64>) -> Self {
                Self(entries)
            }

            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn norm_sq(&self) -> f64 {
                norm_sq(&self.0)
            }

            pub fn norm(&self) -> f64 {
                self.norm_sq().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|x| x.is_finite())
            }
        }

        impl From<Vec<f64>> for $ty {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

dense_common!(ModelVector);
dense_common!(GradientVector);

impl ModelVector {
    /// `self - scale * g`, in place.
    pub fn step(&mut self, scale: f64, g: &[f64]) {
        axpy(&mut self.0, -scale, g);
    }

    /// `self - other` as a plain vector.
    pub fn diff(&self, other: &ModelVector) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }
}

impl GradientVector {
    /// Accumulates `scale * other` into `self`.
    pub fn add_scaled(&mut self, scale: f64, other: &[f64]) {
        axpy(&mut self.0, scale, other);
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|x| *x *= factor);
    }
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
