//! Synthetic strongly convex fixture with closed-form constants.

use oafel_core::learner::{Dataset, Partition, PartitionMode, QuadraticModel, Shard};
use oafel_core::rng::RngStream;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::HarnessError;

/// Shape of the synthetic problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub devices: usize,
    pub dim: usize,
    pub samples_per_device: usize,
    /// Diagonal of the shared curvature `A`.
    pub curvature: Vec<f64>,
    /// Standard deviation of per-device centers around the origin.
    pub center_spread: f64,
    /// Standard deviation of samples around their device's center.
    pub noise_spread: f64,
    pub init_scale: f64,
}

/// Dataset family plus the quantities an analyst would derive by hand.
#[derive(Debug, Clone)]
pub struct SynthQuadratic {
    pub model: QuadraticModel,
    pub data: Dataset,
    /// Device `n` owns samples `n * m .. (n + 1) * m`.
    pub partition: Partition,
    pub l_smooth: f64,
    pub mu: f64,
    /// Largest exact per-sample gradient variance over shards.
    pub g_sq: f64,
    /// Population value `noise_spread^2 * sum(diag(A)^2)`.
    pub g_sq_population: f64,
    pub w_star: Vec<f64>,
    pub f_star: f64,
}

impl SynthQuadratic {
    pub fn shards(&self) -> Vec<Shard<'_>> {
        (0..self.partition.devices()).map(|n| self.partition.shard(&self.data, n)).collect()
    }

    /// `F(w) - F*` on the full dataset.
    pub fn gap(&self, w: &[f64]) -> f64 {
        let d: Vec<f64> = w.iter().zip(&self.w_star).map(|(a, b)| a - b).collect();
        self.model.half_quad_form(&d)
    }
}

pub fn synth_quadratic(spec: &QuadraticSpec, rng: &mut RngStream) -> Result<SynthQuadratic, HarnessError> {
    if spec.dim == 0 || spec.curvature.len() != spec.dim {
        return Err(HarnessError::Spec(format!(
            "quadratic curvature needs {} entries, got {}",
            spec.dim,
            spec.curvature.len()
        )));
    }
    if spec.devices == 0 || spec.samples_per_device == 0 {
        return Err(HarnessError::Spec("quadratic fixture needs devices and samples".into()));
    }
    let model = QuadraticModel::diagonal(&spec.curvature)?.with_init_scale(spec.init_scale);
    let total = spec.devices * spec.samples_per_device;
    let mut features = Vec::with_capacity(total * spec.dim);
    for _ in 0..spec.devices {
        let center: Vec<f64> =
            (0..spec.dim).map(|_| spec.center_spread * rng.sample::<f64, _>(StandardNormal)).collect();
        for _ in 0..spec.samples_per_device {
            features.extend(center.iter().map(|c| c + spec.noise_spread * rng.sample::<f64, _>(StandardNormal)));
        }
    }
    let data = Dataset::new(features, vec![0; total], spec.dim, 1)?;
    let shards = (0..spec.devices)
        .map(|n| (n * spec.samples_per_device..(n + 1) * spec.samples_per_device).collect())
        .collect();
    let mode = if spec.center_spread == 0.0 { PartitionMode::Iid } else { PartitionMode::NonIid(1) };
    let partition = Partition { shards, mode };
    let (w_star, f_star) = model.optimum(&data, &data.all_indices());
    let g_sq = (0..spec.devices)
        .map(|n| model.shard_gradient_variance(&partition.shard(&data, n)))
        .fold(0.0, f64::max);
    let g_sq_population = spec.noise_spread.powi(2) * spec.curvature.iter().map(|a| a * a).sum::<f64>();
    Ok(SynthQuadratic {
        l_smooth: model.smoothness(),
        mu: model.strong_convexity(),
        model,
        data,
        partition,
        g_sq,
        g_sq_population,
        w_star,
        f_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use oafel_core::rng::derive_stream;

    fn spec(curvature: Vec<f64>, center: f64, noise: f64) -> QuadraticSpec {
        QuadraticSpec {
            devices: 2,
            dim: curvature.len(),
            samples_per_device: 50,
            curvature,
            center_spread: center,
            noise_spread: noise,
            init_scale: 1.0,
        }
    }

    #[test]
    fn identity_at_origin() {
        let q = synth_quadratic(&spec(vec![1.0, 1.0], 0.0, 0.0), &mut derive_stream(1, "data", 0, 0)).unwrap();
        assert_eq!(q.w_star, vec![0.0, 0.0]);
        assert_eq!(q.f_star, 0.0);
        assert_eq!((q.l_smooth, q.mu), (1.0, 1.0));
        assert_eq!(q.g_sq, 0.0);
    }

    #[test]
    fn diagonal_constants() {
        let q = synth_quadratic(&spec(vec![1.0, 4.0], 0.5, 1.0), &mut derive_stream(1, "data", 0, 0)).unwrap();
        assert_eq!((q.l_smooth, q.mu), (4.0, 1.0));
        assert_eq!(q.g_sq_population, 17.0);
        assert!(q.gap(&q.w_star).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_curvature() {
        let mut s = spec(vec![1.0], 0.0, 1.0);
        s.dim = 2;
        assert!(synth_quadratic(&s, &mut derive_stream(1, "data", 0, 0)).is_err());
    }
}
