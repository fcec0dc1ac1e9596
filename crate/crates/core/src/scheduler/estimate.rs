use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::learner::{local_gradient, LearnerError, LossModel, Shard};
use crate::rng::RngStream;
use crate::vector::ModelVector;

/// Last reported `||g~||^2` per device, the EST-P predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistory {
    last: Vec<Option<f64>>,
}

impl NormHistory {
    pub fn new(devices: usize) -> Self {
        Self { last: vec![None; devices] }
    }

    pub fn report(&mut self, device: usize, norm_sq: f64) {
        self.last[device] = Some(norm_sq);
    }

    pub fn last(&self, device: usize) -> Option<f64> {
        self.last[device]
    }

    /// Current EST-P estimates for every device.
    pub fn est_p(&self) -> Result<Vec<f64>, SchedulerError> {
        self.last
            .iter()
            .enumerate()
            .map(|(n, v)| v.ok_or(SchedulerError::MissingInitialReport(n)))
            .collect()
    }
}

/// EST-C probe: squared norm of a gradient on a fresh `est_batch`-sample
/// batch, plus the probe's computation energy `e_n * L_e`.
pub fn est_c(
    model: &LossModel,
    w: &ModelVector,
    shard: &Shard<'_>,
    est_batch: usize,
    batch_size: usize,
    energy_per_sample: f64,
    rng: &mut RngStream,
) -> Result<(f64, f64), LearnerError> {
    if est_batch == 0 || est_batch > batch_size {
        return Err(LearnerError::BatchTooLarge { batch: est_batch, shard: batch_size });
    }
    let probe = local_gradient(model, w, shard, est_batch, rng)?;
    Ok((probe.norm_sq, energy_per_sample * est_batch as f64))
}

/// `sigma_t^2 / h_obs^2 * norm_estimate + e_n * L_b * K_local`.
pub fn estimate_energy(
    sigma_t: f64,
    h_obs: f64,
    norm_estimate: f64,
    energy_per_sample: f64,
    batch_size: usize,
    local_iters: usize,
) -> f64 {
    debug_assert!(h_obs > 0.0);
    sigma_t * sigma_t / (h_obs * h_obs) * norm_estimate
        + compute_energy(energy_per_sample, batch_size, local_iters)
}

/// `e_n * L_b * K_local`.
pub fn compute_energy(energy_per_sample: f64, batch_size: usize, local_iters: usize) -> f64 {
    energy_per_sample * (batch_size * local_iters) as f64
}
