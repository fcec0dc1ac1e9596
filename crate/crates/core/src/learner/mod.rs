//! Datasets, partitioning, differentiable models and local SGD.

mod dataset;
mod mlp;
mod quadratic;

pub use dataset::{partition_dataset, Dataset, Partition, PartitionMode, Shard};
pub use mlp::MlpModel;
pub use quadratic::QuadraticModel;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::RngStream;
use crate::vector::{axpy, dist_sq, norm_sq, GradientVector, ModelVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("dataset of {len} samples cannot be split into {devices} equal shards")]
    IndivisibleDataset { len: usize, devices: usize },
    #[error("label multiplicities cannot support a non-i.i.d.({0}) shard cut")]
    InfeasibleLabelAssignment(usize),
    #[error("batch of {batch} exceeds shard of {shard} samples")]
    BatchTooLarge { batch: usize, shard: usize },
    #[error("smoothness estimation needs at least two rounds of history")]
    InsufficientHistory,
    #[error("variance estimation needs at least two probes, got {0}")]
    InsufficientProbes(usize),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("local iterations must be >= 1")]
    NoLocalIterations,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// The per-sample loss `f(w, x)` and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    Quadratic(QuadraticModel),
    MlpSoftmax(MlpModel),
}

impl LossModel {
    /// Model dimension `s`.
    pub fn dim(&self) -> usize {
        match self {
            LossModel::Quadratic(q) => q.dim(),
            LossModel::MlpSoftmax(m) => m.param_count(),
        }
    }

    pub fn init(&self, rng: &mut RngStream) -> ModelVector {
        match self {
            LossModel::Quadratic(q) => ModelVector::new(
                (0..q.dim())
                    .map(|_| q.init_scale() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            ),
            LossModel::MlpSoftmax(m) => ModelVector::new(m.init(rng)),
        }
    }

    /// `(1/|I|) sum_{i in I} grad f(w, x_i)`.
    pub fn mean_grad(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> Vec<f64> {
        match self {
            LossModel::Quadratic(q) => {
                if indices.is_empty() {
                    return vec![0.0; q.dim()];
                }
                let mut centre = vec![0.0; q.dim()];
                for &i in indices {
                    axpy(&mut centre, 1.0, data.feature(i));
                }
                let inv = 1.0 / indices.len() as f64;
                let diff: Vec<f64> = w.iter().zip(&centre).map(|(wi, ci)| wi - ci * inv).collect();
                q.apply(&diff)
            }
            LossModel::MlpSoftmax(m) => m.mean_grad(w, data, indices),
        }
    }

    /// Mean loss over `indices`.
    pub fn mean_loss(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> f64 {
        match self {
            LossModel::Quadratic(q) => {
                if indices.is_empty() {
                    return 0.0;
                }
                let total: f64 = indices
                    .iter()
                    .map(|&i| {
                        let d: Vec<f64> = w.iter().zip(data.feature(i)).map(|(a, b)| a - b).collect();
                        q.half_quad_form(&d)
                    })
                    .sum();
                total / indices.len() as f64
            }
            LossModel::MlpSoftmax(m) => m.loss_and_accuracy(w, data, indices).0,
        }
    }

    /// Classification accuracy; `None` for the regression fixture.
    pub fn accuracy(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> Option<f64> {
        match self {
            LossModel::Quadratic(_) => None,
            LossModel::MlpSoftmax(m) => Some(m.loss_and_accuracy(w, data, indices).1),
        }
    }

    /// Mean loss and (for classifiers) accuracy in one pass.
    pub fn evaluate(&self, w: &[f64], data: &Dataset, indices: &[usize]) -> (f64, Option<f64>) {
        match self {
            LossModel::Quadratic(_) => (self.mean_loss(w, data, indices), None),
            LossModel::MlpSoftmax(m) => {
                let (l, a) = m.loss_and_accuracy(w, data, indices);
                (l, Some(a))
            }
        }
    }

    /// Exact smoothness / strong convexity, where known.
    pub fn curvature_bounds(&self) -> Option<(f64, f64)> {
        match self {
            LossModel::Quadratic(q) => Some((q.smoothness(), q.strong_convexity())),
            LossModel::MlpSoftmax(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateResult {
    pub effective_gradient: GradientVector,
    /// `||g~||_2^2` of `effective_gradient`.
    pub norm_sq: f64,
    pub samples_used: usize,
}

impl LocalUpdateResult {
    fn from_gradient(g: Vec<f64>, samples_used: usize) -> Self {
        let norm_sq = norm_sq(&g);
        Self { effective_gradient: GradientVector::new(g), norm_sq, samples_used }
    }
}

fn draw_batch(shard: &Shard<'_>, batch: usize, rng: &mut RngStream) -> Result<Vec<usize>, LearnerError> {
    if batch > shard.len() {
        return Err(LearnerError::BatchTooLarge { batch, shard: shard.len() });
    }
    Ok(sample(rng, shard.len(), batch).into_iter().map(|k| shard.indices[k]).collect())
}

fn check_dim(model: &LossModel, w: &ModelVector) -> Result<(), LearnerError> {
    if w.dim() != model.dim() {
        return Err(LearnerError::DimensionMismatch { expected: model.dim(), got: w.dim() });
    }
    Ok(())
}

/// Mini-batch gradient on `batch_size` samples drawn uniformly without
/// replacement from the shard.
pub fn local_gradient(
    model: &LossModel,
    w: &ModelVector,
    shard: &Shard<'_>,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<LocalUpdateResult, LearnerError> {
    check_dim(model, w)?;
    let batch = draw_batch(shard, batch_size, rng)?;
    let g = model.mean_grad(w.as_slice(), shard.data, &batch);
    Ok(LocalUpdateResult::from_gradient(g, batch_size))
}

/// Runs `local_iters` SGD steps with heavy-ball momentum from `w` and
/// reports the effective gradient `(w - w_final) / eta`.
///
/// The effective gradient is accumulated as the sum of the momentum
/// updates, so with one iteration and zero momentum it is bit-identical to
/// [`local_gradient`] on the same stream.
#[allow(clippy::too_many_arguments)]
pub fn local_update_multi(
    model: &LossModel,
    w: &ModelVector,
    shard: &Shard<'_>,
    local_iters: usize,
    batch_size: usize,
    eta: f64,
    momentum: f64,
    rng: &mut RngStream,
) -> Result<LocalUpdateResult, LearnerError> {
    if local_iters == 0 {
        return Err(LearnerError::NoLocalIterations);
    }
    check_dim(model, w)?;
    if local_iters == 1 {
        return local_gradient(model, w, shard, batch_size, rng);
    }
    let mut local = w.clone();
    let mut velocity = vec![0.0; w.dim()];
    let mut total = vec![0.0; w.dim()];
    for _ in 0..local_iters {
        let batch = draw_batch(shard, batch_size, rng)?;
        let g = model.mean_grad(local.as_slice(), shard.data, &batch);
        for (v, gi) in velocity.iter_mut().zip(&g) {
            *v = momentum * *v + gi;
        }
        local.step(eta, &velocity);
        axpy(&mut total, 1.0, &velocity);
    }
    Ok(LocalUpdateResult::from_gradient(total, local_iters * batch_size))
}

/// Full local gradient `g_{n,t}` over the entire shard.
pub fn local_full_gradient(model: &LossModel, w: &ModelVector, shard: &Shard<'_>) -> GradientVector {
    GradientVector::new(model.mean_grad(w.as_slice(), shard.data, shard.indices))
}

/// Global full gradient `(1/N) sum_n g_{n,t}`.
pub fn global_full_gradient(model: &LossModel, shards: &[Shard<'_>], w: &ModelVector) -> GradientVector {
    let mut g = GradientVector::zeros(model.dim());
    if shards.is_empty() {
        return g;
    }
    let inv = 1.0 / shards.len() as f64;
    for shard in shards {
        g.add_scaled(inv, local_full_gradient(model, w, shard).as_slice());
    }
    g
}

/// One round of history for smoothness estimation: the model the gradients
/// were computed at, and the gradients reported by each device.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub model: ModelVector,
    pub gradients: BTreeMap<usize, GradientVector>,
}

const SMOOTHNESS_MIN_STEP: f64 = 1e-12;

/// Largest `||g_{n,t} - g_{n,t-1}|| / ||w_{t-1} - w_{t-2}||` over devices
/// that reported in two consecutive rounds.
pub fn estimate_smoothness(history: &[GradientSnapshot]) -> Result<f64, LearnerError> {
    if history.len() < 2 {
        return Err(LearnerError::InsufficientHistory);
    }
    let mut tracker = SmoothnessTracker::default();
    for snap in history {
        tracker.observe(&snap.model, &snap.gradients);
    }
    Ok(tracker.estimate().unwrap_or(0.0))
}

/// Streaming form of [`estimate_smoothness`] that only keeps the previous
/// round in memory.
#[derive(Debug, Clone, Default)]
pub struct SmoothnessTracker {
    previous: Option<GradientSnapshot>,
    rounds: usize,
    max_ratio: f64,
}

impl SmoothnessTracker {
    pub fn observe(&mut self, model: &ModelVector, gradients: &BTreeMap<usize, GradientVector>) {
        if let Some(prev) = &self.previous {
            let step = dist_sq(model.as_slice(), prev.model.as_slice()).sqrt();
            if step >= SMOOTHNESS_MIN_STEP {
                for (n, g) in gradients {
                    if let Some(g_prev) = prev.gradients.get(n) {
                        let ratio = dist_sq(g.as_slice(), g_prev.as_slice()).sqrt() / step;
                        self.max_ratio = self.max_ratio.max(ratio);
                    }
                }
            }
        }
        self.rounds += 1;
        self.previous = Some(GradientSnapshot { model: model.clone(), gradients: gradients.clone() });
    }

    /// `None` until two rounds have been observed.
    pub fn estimate(&self) -> Option<f64> {
        (self.rounds >= 2).then_some(self.max_ratio)
    }
}

/// Empirical per-sample gradient variance around the probe mean, used as a
/// `G^2` estimate.
pub fn estimate_variance_bound(
    model: &LossModel,
    shard: &Shard<'_>,
    w: &ModelVector,
    probe_count: usize,
    rng: &mut RngStream,
) -> Result<f64, LearnerError> {
    if probe_count < 2 {
        return Err(LearnerError::InsufficientProbes(probe_count));
    }
    check_dim(model, w)?;
    if shard.is_empty() {
        return Err(LearnerError::BatchTooLarge { batch: probe_count, shard: 0 });
    }
    let probes: Vec<usize> = if probe_count <= shard.len() {
        sample(rng, shard.len(), probe_count).into_iter().map(|k| shard.indices[k]).collect()
    } else {
        (0..probe_count).map(|_| shard.indices[rng.gen_range(0..shard.len())]).collect()
    };
    let mut sum = vec![0.0; model.dim()];
    let mut sum_sq = 0.0;
    for &i in &probes {
        let g = model.mean_grad(w.as_slice(), shard.data, &[i]);
        sum_sq += norm_sq(&g);
        axpy(&mut sum, 1.0, &g);
    }
    let p = probe_count as f64;
    Ok((sum_sq / p - norm_sq(&sum) / (p * p)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn points(rows: &[[f64; 2]]) -> Dataset {
        Dataset::new(rows.iter().flatten().copied().collect(), vec![0; rows.len()], 2, 1).unwrap()
    }

    fn half_norm_model() -> LossModel {
        LossModel::Quadratic(QuadraticModel::identity(2))
    }

    #[test]
    fn quadratic_pair_gradient() {
        let data = points(&[[1.0, 2.0], [3.0, -2.0]]);
        let idx = [0, 1];
        let shard = Shard::new(&data, &idx);
        let w = ModelVector::new(vec![0.5, 0.5]);
        let r = local_gradient(&half_norm_model(), &w, &shard, 2, &mut derive_stream(0, "b", 0, 0)).unwrap();
        // w - (x1 + x2) / 2
        assert_eq!(r.effective_gradient.as_slice(), &[0.5 - 2.0, 0.5 - 0.0]);
        assert_eq!(r.samples_used, 2);
        assert!((r.norm_sq - r.effective_gradient.norm_sq()).abs() <= 1e-12);
    }

    #[test]
    fn full_batch_equals_full_gradient() {
        let data = points(&[[1.0, 2.0], [3.0, -2.0], [0.0, 1.0]]);
        let idx = [0, 1, 2];
        let shard = Shard::new(&data, &idx);
        let w = ModelVector::new(vec![0.1, -0.3]);
        let model = half_norm_model();
        let r = local_gradient(&model, &w, &shard, 3, &mut derive_stream(0, "b", 0, 0)).unwrap();
        let full = local_full_gradient(&model, &w, &shard);
        for (a, b) in r.effective_gradient.as_slice().iter().zip(full.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_too_large() {
        let data = points(&[[1.0, 2.0]]);
        let idx = [0];
        let shard = Shard::new(&data, &idx);
        let w = ModelVector::zeros(2);
        assert_eq!(
            local_gradient(&half_norm_model(), &w, &shard, 2, &mut derive_stream(0, "b", 0, 0)),
            Err(LearnerError::BatchTooLarge { batch: 2, shard: 1 })
        );
    }

    #[test]
    fn single_iteration_reduces_to_local_gradient() {
        let data = points(&[[1.0, 2.0], [3.0, -2.0], [0.0, 1.0], [5.0, 5.0]]);
        let idx = [0, 1, 2, 3];
        let shard = Shard::new(&data, &idx);
        let w = ModelVector::new(vec![0.2, 0.7]);
        let model = half_norm_model();
        let a = local_gradient(&model, &w, &shard, 2, &mut derive_stream(4, "b", 1, 2)).unwrap();
        let b = local_update_multi(&model, &w, &shard, 1, 2, 0.1, 0.0, &mut derive_stream(4, "b", 1, 2))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_step_quadratic_by_hand() {
        // Full-batch on a diag(1, 2) quadratic with data centred at c = (1, -1):
        // grad = A (w - c). Two steps of eta = 0.1 from w0 = (0, 0).
        let data = points(&[[2.0, 0.0], [0.0, -2.0]]);
        let idx = [0, 1];
        let shard = Shard::new(&data, &idx);
        let model = LossModel::Quadratic(QuadraticModel::diagonal(&[1.0, 2.0]).unwrap());
        let w0 = ModelVector::zeros(2);
        let r = local_update_multi(&model, &w0, &shard, 2, 2, 0.1, 0.0, &mut derive_stream(0, "b", 0, 0))
            .unwrap();
        // step 1: g1 = (-1, 2), w1 = (0.1, -0.2)
        // step 2: g2 = (0.1 - 1, 2 * (-0.2 + 1)) = (-0.9, 1.6), w2 = (0.19, -0.36)
        // effective = (w0 - w2) / 0.1 = (-1.9, 3.6)
        let expected = [-1.9, 3.6];
        for (a, b) in r.effective_gradient.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(r.samples_used, 4);
    }

    #[test]
    fn momentum_two_steps_by_hand() {
        let data = points(&[[2.0, 0.0], [0.0, -2.0]]);
        let idx = [0, 1];
        let shard = Shard::new(&data, &idx);
        let model = LossModel::Quadratic(QuadraticModel::diagonal(&[1.0, 2.0]).unwrap());
        let r = local_update_multi(
            &model,
            &ModelVector::zeros(2),
            &shard,
            2,
            2,
            0.1,
            0.5,
            &mut derive_stream(0, "b", 0, 0),
        )
        .unwrap();
        // v1 = g1 = (-1, 2); w1 = (0.1, -0.2)
        // g2 = (-0.9, 1.6); v2 = 0.5 v1 + g2 = (-1.4, 2.6); w2 = (0.24, -0.46)
        let expected = [-2.4, 4.6];
        for (a, b) in r.effective_gradient.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn global_gradient_closed_form() {
        let data = points(&[[1.0, 0.0], [3.0, 0.0], [0.0, 4.0], [0.0, 2.0]]);
        let a = [0, 1];
        let b = [2, 3];
        let shards = [Shard::new(&data, &a), Shard::new(&data, &b)];
        let w = ModelVector::new(vec![1.0, 1.0]);
        let model = half_norm_model();
        // device optima (2, 0) and (0, 3): w - mean = (1 - 1, 1 - 1.5)
        let g = global_full_gradient(&model, &shards, &w);
        assert_eq!(g.as_slice(), &[0.0, -0.5]);
        let single = global_full_gradient(&model, &shards[..1], &w);
        assert_eq!(single, local_full_gradient(&model, &w, &shards[0]));
    }

    #[test]
    fn smoothness_estimates() {
        let snap = |w: Vec<f64>, g: Vec<f64>| GradientSnapshot {
            model: ModelVector::new(w),
            gradients: BTreeMap::from([(0, GradientVector::new(g))]),
        };
        assert_eq!(
            estimate_smoothness(&[snap(vec![0.0], vec![1.0])]),
            Err(LearnerError::InsufficientHistory)
        );
        let constant = [snap(vec![0.0], vec![1.0]), snap(vec![1.0], vec![1.0]), snap(vec![3.0], vec![1.0])];
        assert_eq!(estimate_smoothness(&constant).unwrap(), 0.0);

        // Full-batch gradients of diag(2, 1/2) along a trajectory: ratio <= 2.
        let model = LossModel::Quadratic(QuadraticModel::diagonal(&[2.0, 0.5]).unwrap());
        let data = points(&[[0.0, 0.0]]);
        let idx = [0];
        let shard = Shard::new(&data, &idx);
        let traj = [vec![1.0, 0.0], vec![0.5, 0.01], vec![0.2, 0.02]];
        let hist: Vec<GradientSnapshot> = traj
            .iter()
            .map(|w| {
                let w = ModelVector::new(w.clone());
                let g = local_full_gradient(&model, &w, &shard);
                GradientSnapshot { model: w, gradients: BTreeMap::from([(0, g)]) }
            })
            .collect();
        let l = estimate_smoothness(&hist).unwrap();
        assert!(l <= 2.0 + 1e-12 && l > 1.99, "{l}");
    }

    #[test]
    fn variance_bound_cases() {
        let same = points(&[[1.0, 1.0]; 8]);
        let idx: Vec<usize> = (0..8).collect();
        let shard = Shard::new(&same, &idx);
        let w = ModelVector::new(vec![0.3, 0.1]);
        let model = half_norm_model();
        let v = estimate_variance_bound(&model, &shard, &w, 5, &mut derive_stream(0, "v", 0, 0)).unwrap();
        assert!(v.abs() < 1e-15);
        assert_eq!(
            estimate_variance_bound(&model, &shard, &w, 1, &mut derive_stream(0, "v", 0, 0)),
            Err(LearnerError::InsufficientProbes(1))
        );
    }

    #[test]
    fn variance_bound_matches_covariance_trace() {
        // Isotropic cloud with per-coordinate variance 0.25 and 0.04: trace 0.29.
        let mut rng = derive_stream(11, "cloud", 0, 0);
        let rows: Vec<[f64; 2]> = (0..5000)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [0.5 * a + 3.0, 0.2 * b - 1.0]
            })
            .collect();
        let data = points(&rows);
        let idx: Vec<usize> = (0..rows.len()).collect();
        let shard = Shard::new(&data, &idx);
        let w = ModelVector::new(vec![0.0, 0.0]);
        let v = estimate_variance_bound(&half_norm_model(), &shard, &w, 1000, &mut derive_stream(2, "v", 0, 0))
            .unwrap();
        assert!((v - 0.29).abs() <= 0.029, "{v}");
    }
}
