//! Over-the-air analog aggregation.
//!
//! Scheduled devices pre-scale their gradients by `sigma_t / h_n` so the
//! multiple-access channel delivers `y = sigma_t * sum g + z`. The PS then
//! divides by `sigma_t |B|` and takes a gradient step.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::PowerMode;
use crate::vector::{norm_sq, GradientVector, ModelVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OtaaError {
    #[error("norm estimate for device {0} is not strictly positive")]
    ZeroNormEstimate(usize),
    #[error("no norm estimates supplied")]
    NoEstimates,
    #[error("cannot aggregate over an empty schedule")]
    EmptySchedule,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Power scalar `sigma_t` from squared-norm estimates of every device.
///
/// `PaperLiteral`: `gamma0 * sigma0_sq * sqrt(s) / min ||g||`.
/// `SnrConsistent`: `sqrt(sigma0_sq * gamma0 * s) / min ||g||`, the value at
/// which the expected received SNR of the weakest device alone is `gamma0`.
pub fn power_scalar(
    norm_sq_estimates: &[f64],
    gamma0: f64,
    sigma0_sq: f64,
    dim: usize,
    mode: PowerMode,
) -> Result<f64, OtaaError> {
    if norm_sq_estimates.is_empty() {
        return Err(OtaaError::NoEstimates);
    }
    if let Some(bad) = norm_sq_estimates.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(OtaaError::ZeroNormEstimate(bad));
    }
    let min_norm = norm_sq_estimates.iter().copied().fold(f64::INFINITY, f64::min).sqrt();
    let s = dim as f64;
    Ok(match mode {
        PowerMode::PaperLiteral => gamma0 * sigma0_sq * s.sqrt() / min_norm,
        PowerMode::SnrConsistent => (sigma0_sq * gamma0 * s).sqrt() / min_norm,
    })
}

/// Transmit energy `sigma_t^2 ||g||^2 / h^2`.
pub fn transmit_energy(sigma_t: f64, gain: f64, norm_sq: f64) -> f64 {
    debug_assert!(gain > 0.0);
    sigma_t * sigma_t * norm_sq / (gain * gain)
}

/// One device's contribution to the over-the-air sum.
#[derive(Debug, Clone, Copy)]
pub struct Upload<'a> {
    pub device: usize,
    pub gradient: &'a GradientVector,
    /// True channel gain during transmission.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    /// Received vector `y_t`.
    pub y: Vec<f64>,
    pub w_next: ModelVector,
    /// Realized `sigma_t^2 ||sum g||^2 / ||z||^2`.
    pub snr: f64,
    pub transmit_energy: BTreeMap<usize, f64>,
}

/// Superposes the uploads with noise `z` and applies the PS update
/// `w_next = w_prev - eta * y / (sigma_t |B|)`.
///
/// Uploads are summed in the order given; callers pass them sorted by
/// device index so results do not depend on scheduling order.
pub fn aggregate(
    w_prev: &ModelVector,
    uploads: &[Upload<'_>],
    sigma_t: f64,
    eta: f64,
    noise: &[f64],
) -> Result<AggregationOutcome, OtaaError> {
    if uploads.is_empty() {
        return Err(OtaaError::EmptySchedule);
    }
    let dim = w_prev.dim();
    if noise.len() != dim {
        return Err(OtaaError::DimensionMismatch { expected: dim, got: noise.len() });
    }
    let mut sum = vec![0.0; dim];
    let mut transmit = BTreeMap::new();
    for up in uploads {
        if up.gradient.dim() != dim {
            return Err(OtaaError::DimensionMismatch { expected: dim, got: up.gradient.dim() });
        }
        for (acc, g) in sum.iter_mut().zip(up.gradient.as_slice()) {
            *acc += g;
        }
        transmit.insert(up.device, transmit_energy(sigma_t, up.gain, up.gradient.norm_sq()));
    }
    let y: Vec<f64> = sum.iter().zip(noise).map(|(g, z)| sigma_t * g + z).collect();
    let b = uploads.len() as f64;

    // w - eta * (sum g / |B| + z / (sigma |B|)), evaluated term by term so the
    // noiseless part does not depend on sigma.
    let mut w_next = w_prev.clone();
    for ((w, g), z) in w_next.as_mut_slice().iter_mut().zip(&sum).zip(noise) {
        *w -= eta * (g / b + z / (sigma_t * b));
    }

    let noise_energy = norm_sq(noise);
    let signal = sigma_t * sigma_t * norm_sq(&sum);
    let snr = if noise_energy > 0.0 { signal / noise_energy } else { f64::INFINITY };
    Ok(AggregationOutcome { y, w_next, snr, transmit_energy: transmit })
}

/// Per-entry variance `sigma0_sq / (sigma_t^2 |B|^2)` of the reconstruction
/// noise `z / (sigma_t |B|)`.
pub fn expected_update_noise_var(sigma_t: f64, scheduled: usize, sigma0_sq: f64) -> f64 {
    assert!(scheduled >= 1, "at least one device must be scheduled");
    let b = scheduled as f64;
    sigma0_sq / (sigma_t * sigma_t * b * b)
}

/// Expected received SNR `sigma_t^2 ||sum g||^2 / (sigma0_sq s)`.
pub fn expected_snr(sigma_t: f64, sum_norm_sq: f64, sigma0_sq: f64, dim: usize) -> f64 {
    sigma_t * sigma_t * sum_norm_sq / (sigma0_sq * dim as f64)
}
