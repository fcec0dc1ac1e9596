//! Fading gains, imperfect gain observation and receiver noise.

use rand::distributions::{Distribution, Open01};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::RngStream;

/// True and observed gains for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `h_{n,t}`, in effect during transmission.
    pub h: Vec<f64>,
    /// `h~_{n,t}`, observed at the start of the round.
    pub h_obs: Vec<f64>,
}

/// A per-round gain sampler. Gains are drawn independently every round.
pub trait FadingModel: Send + Sync {
    fn sample_gains(&self, devices: usize, rng: &mut RngStream) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rayleigh {
    pub scale: f64,
}

impl Default for Rayleigh {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl Rayleigh {
    /// Inverse-CDF draw `scale * sqrt(-2 ln U)` with `U` in the open unit
    /// interval, so the result is strictly positive and finite.
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        let u: f64 = Open01.sample(rng);
        self.scale * (-2.0 * u.ln()).sqrt()
    }
}

impl FadingModel for Rayleigh {
    fn sample_gains(&self, devices: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..devices).map(|_| self.draw(rng)).collect()
    }
}

/// `devices` independent Rayleigh gains with the given scale.
pub fn sample_channel(devices: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    assert!(scale > 0.0, "Rayleigh scale must be positive");
    Rayleigh { scale }.sample_gains(devices, rng)
}

/// Observed gains, each uniform in `[(1 - e) h, (1 + e) h]`.
///
/// `error_fraction == 0` returns `h` unchanged without consuming draws.
pub fn observe_channel(h: &[f64], error_fraction: f64, rng: &mut RngStream) -> Vec<f64> {
    assert!(
        (0.0..1.0).contains(&error_fraction),
        "observation error fraction must lie in [0, 1)"
    );
    if error_fraction == 0.0 {
        return h.to_vec();
    }
    h.iter()
        .map(|&g| {
            let u: f64 = rng.gen();
            g * (1.0 - error_fraction + 2.0 * error_fraction * u)
        })
        .collect()
}

/// Draws both the true and the observed gains for one round.
pub fn realize(
    fading: &dyn FadingModel,
    devices: usize,
    error_fraction: f64,
    gain_rng: &mut RngStream,
    obs_rng: &mut RngStream,
) -> ChannelRealization {
    let h = fading.sample_gains(devices, gain_rng);
    let h_obs = observe_channel(&h, error_fraction, obs_rng);
    ChannelRealization { h, h_obs }
}

/// AWGN vector `z_t` with i.i.d. `N(0, sigma0_sq)` entries.
pub fn sample_noise(dim: usize, sigma0_sq: f64, rng: &mut RngStream) -> Vec<f64> {
    assert!(sigma0_sq > 0.0, "noise variance must be positive");
    let sd = sigma0_sq.sqrt();
    (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}
