use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estimate::{compute_energy, est_c, estimate_energy, NormHistory};
use super::policy::{
    all_schedule, myopic_schedule, reschedule_filter, schedule_round, PenaltyCoeffs, Policy,
    RoundDecision,
};
use super::queue::{EnergyLedger, EnergyRecord, VirtualQueue};
use super::SchedulerError;
use crate::channel::{realize, sample_noise, Rayleigh};
use crate::config::{DeviceConfig, Hyperparams, NormEstimator, Rescheduling};
use crate::learner::{local_update_multi, Dataset, LocalUpdateResult, LossModel, Shard, SmoothnessTracker};
use crate::otaa::{aggregate, power_scalar, transmit_energy, Upload};
use crate::rng::derive_stream;
use crate::vector::{GradientVector, ModelVector};

/// Fixed inputs shared by every round of one run.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    pub model: &'a LossModel,
    pub data: &'a Dataset,
    pub shards: Vec<Shard<'a>>,
    pub hyper: &'a Hyperparams,
    pub devices: &'a [DeviceConfig],
    pub fading: Rayleigh,
    /// Gain observation error fraction `e`.
    pub obs_error: f64,
    pub seed: u64,
}

impl Environment<'_> {
    fn budget_shares(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.budget_share(self.hyper.rounds)).collect()
    }

    fn local_update(&self, w: &ModelVector, n: usize, t: usize) -> Result<LocalUpdateResult, SchedulerError> {
        let hp = self.hyper;
        Ok(local_update_multi(
            self.model,
            w,
            &self.shards[n],
            hp.local_iters,
            hp.batch_size,
            hp.eta.at(t.max(1)),
            hp.momentum,
            &mut derive_stream(self.seed, "batch", n, t),
        )?)
    }
}

/// Mutable run state carried between rounds.
#[derive(Debug, Clone)]
pub struct SimulationState {
    /// Rounds completed so far.
    pub t: usize,
    pub w: ModelVector,
    pub queues: VirtualQueue,
    pub ledger: EnergyLedger,
    pub norms: NormHistory,
    pub smoothness: SmoothnessTracker,
}

impl SimulationState {
    /// Draws `w_0` from the model's initializer and collects round-0 reports.
    pub fn new(env: &Environment<'_>) -> Result<Self, SchedulerError> {
        let w = env.model.init(&mut derive_stream(env.seed, "init", 0, 0));
        Self::with_initial_model(env, w)
    }

    /// Every device runs one local update at `w_0` and reports its squared
    /// norm; this initialization is not charged to the energy budget.
    pub fn with_initial_model(env: &Environment<'_>, w: ModelVector) -> Result<Self, SchedulerError> {
        let n = env.devices.len();
        if n == 0 || env.shards.len() != n || env.hyper.devices != n {
            return Err(SchedulerError::NoDevices);
        }
        let reports: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|dev| env.local_update(&w, dev, 0).map(|r| r.norm_sq))
            .collect::<Result<_, _>>()?;
        let mut norms = NormHistory::new(n);
        for (dev, r) in reports.into_iter().enumerate() {
            norms.report(dev, r);
        }
        Ok(Self {
            t: 0,
            w,
            queues: VirtualQueue::new(n, env.hyper.q_min),
            ledger: EnergyLedger::new(env.devices.iter().map(|d| d.budget).collect()),
            norms,
            smoothness: SmoothnessTracker::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRoundRecord {
    pub h: f64,
    pub h_obs: f64,
    pub norm_estimate: f64,
    /// Realized `||g~||^2` when the device computed.
    pub norm_sq: Option<f64>,
    pub q: f64,
    pub q_next: f64,
    pub e_est: f64,
    pub e_cp: f64,
    pub e_tr: f64,
    /// `E_cp + E_tr` the device would consume by transmitting, known once
    /// it has computed its gradient.
    pub e_full: Option<f64>,
    pub scheduled: bool,
    pub backed_off: bool,
    pub budget_share: f64,
    /// Cumulative spend after this round.
    pub spent: f64,
}

impl DeviceRoundRecord {
    /// Energy actually consumed this round.
    pub fn consumed(&self) -> f64 {
        self.e_cp + self.e_tr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub t: usize,
    pub eta: f64,
    pub sigma_t: f64,
    pub k_star: usize,
    pub scheduled: Vec<usize>,
    pub transmitted: Vec<usize>,
    /// Realized received SNR; `None` when nothing was transmitted.
    pub snr: Option<f64>,
    /// `U_t(|B_t|)` for the scheduled count.
    pub penalty: Option<f64>,
    /// `U_t(N)`.
    pub penalty_all: f64,
    pub v_values: Vec<f64>,
    pub objective: Option<f64>,
    pub unified_energy: f64,
    pub devices: Vec<DeviceRoundRecord>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

fn decide(
    env: &Environment<'_>,
    state: &SimulationState,
    policy: Policy,
    e_est: &[f64],
    coeffs: &PenaltyCoeffs,
    t: usize,
) -> RoundDecision {
    match policy {
        Policy::Dynamic => schedule_round(state.queues.values(), e_est, coeffs),
        Policy::Myopic => myopic_schedule(
            state.ledger.budget(),
            state.ledger.spent(),
            e_est,
            coeffs.sigma_t,
            t,
            env.hyper.rounds,
        ),
        Policy::All => all_schedule(e_est, coeffs.sigma_t),
    }
}

/// Executes round `state.t + 1` and advances `state`.
///
/// Order: gains, norm estimates, `sigma_t`, energy estimates, policy,
/// local updates, back-off, aggregation, ledger, queues.
pub fn run_round(
    env: &Environment<'_>,
    state: &mut SimulationState,
    policy: Policy,
) -> Result<RoundTrace, SchedulerError> {
    let hp = env.hyper;
    let n_dev = env.devices.len();
    let t = state.t + 1;
    if t > hp.rounds {
        return Err(SchedulerError::PastFinalRound(t));
    }
    let eta = hp.eta.at(t);

    let channel = realize(
        &env.fading,
        n_dev,
        env.obs_error,
        &mut derive_stream(env.seed, "gain", 0, t),
        &mut derive_stream(env.seed, "obs", 0, t),
    );

    let (norm_est, probe_energy) = match hp.estimator {
        NormEstimator::EstP => (state.norms.est_p()?, vec![0.0; n_dev]),
        NormEstimator::EstC => {
            let w = &state.w;
            let probes: Vec<(f64, f64)> = (0..n_dev)
                .into_par_iter()
                .map(|n| {
                    est_c(
                        env.model,
                        w,
                        &env.shards[n],
                        hp.est_batch_size,
                        hp.batch_size,
                        env.devices[n].energy_per_sample,
                        &mut derive_stream(env.seed, "probe", n, t),
                    )
                })
                .collect::<Result<_, _>>()?;
            probes.into_iter().unzip()
        }
    };

    let sigma_t = power_scalar(&norm_est, hp.gamma0, hp.sigma0_sq, hp.dim, hp.power_mode)?;
    let e_cp_train: Vec<f64> = env
        .devices
        .iter()
        .map(|d| compute_energy(d.energy_per_sample, hp.batch_size, hp.local_iters))
        .collect();
    let e_est: Vec<f64> = (0..n_dev)
        .map(|n| {
            estimate_energy(
                sigma_t,
                channel.h_obs[n],
                norm_est[n],
                env.devices[n].energy_per_sample,
                hp.batch_size,
                hp.local_iters,
            )
        })
        .collect();
    let coeffs = PenaltyCoeffs {
        v: hp.penalty_weight,
        l_smooth: hp.l_smooth,
        eta,
        g_sq: hp.g_sq,
        batch_size: hp.batch_size,
        sigma0_sq: hp.sigma0_sq,
        dim: hp.dim,
        sigma_t,
    };
    let decision = decide(env, state, policy, &e_est, &coeffs, t);

    let updates: Vec<(usize, LocalUpdateResult)> = decision
        .scheduled
        .par_iter()
        .map(|&n| env.local_update(&state.w, n, t).map(|r| (n, r)))
        .collect::<Result<_, _>>()?;

    let e_full: BTreeMap<usize, f64> = updates
        .iter()
        .map(|(n, r)| (*n, e_cp_train[*n] + transmit_energy(sigma_t, channel.h[*n], r.norm_sq)))
        .collect();
    let rescheduling = match policy {
        Policy::Dynamic => hp.rescheduling,
        _ => Rescheduling::Disabled,
    };
    let outcome = reschedule_filter(&decision, &e_full, rescheduling);

    let by_device: BTreeMap<usize, &LocalUpdateResult> = updates.iter().map(|(n, r)| (*n, r)).collect();
    let uploads: Vec<Upload<'_>> = outcome
        .transmit
        .iter()
        .map(|&n| Upload { device: n, gradient: &by_device[&n].effective_gradient, gain: channel.h[n] })
        .collect();
    let (w_next, snr) = if uploads.is_empty() {
        (None, None)
    } else {
        let noise = sample_noise(hp.dim, hp.sigma0_sq, &mut derive_stream(env.seed, "noise", 0, t));
        let agg = aggregate(&state.w, &uploads, sigma_t, eta, &noise)?;
        (Some(agg.w_next), Some(agg.snr))
    };

    let shares = env.budget_shares();
    let mut records = Vec::with_capacity(n_dev);
    let mut consumed = vec![0.0; n_dev];
    for n in 0..n_dev {
        let update = by_device.get(&n);
        let transmits = outcome.transmit.binary_search(&n).is_ok();
        let e_cp = if update.is_some() { e_cp_train[n] } else { probe_energy[n] };
        let e_tr = if transmits { transmit_energy(sigma_t, channel.h[n], update.unwrap().norm_sq) } else { 0.0 };
        consumed[n] = e_cp + e_tr;
        if consumed[n] > 0.0 {
            state.ledger.charge(EnergyRecord { round: t, device: n, e_cp, e_tr, e_est: e_est[n] });
        }
        records.push(DeviceRoundRecord {
            h: channel.h[n],
            h_obs: channel.h_obs[n],
            norm_estimate: norm_est[n],
            norm_sq: update.map(|r| r.norm_sq),
            q: state.queues.get(n),
            q_next: 0.0,
            e_est: e_est[n],
            e_cp,
            e_tr,
            e_full: e_full.get(&n).copied(),
            scheduled: decision.beta[n],
            backed_off: outcome.backed_off.binary_search(&n).is_ok(),
            budget_share: shares[n],
            spent: 0.0,
        });
    }
    state.queues.update(&consumed, &shares);
    for (n, rec) in records.iter_mut().enumerate() {
        rec.q_next = state.queues.get(n);
        rec.spent = state.ledger.spent()[n];
    }

    let gradients: BTreeMap<usize, GradientVector> =
        updates.into_iter().map(|(n, r)| (n, r.effective_gradient)).collect();
    for (&n, g) in &gradients {
        state.norms.report(n, g.norm_sq());
    }
    if !gradients.is_empty() {
        state.smoothness.observe(&state.w, &gradients);
    }
    if let Some(w) = w_next {
        state.w = w;
    }
    state.t = t;

    Ok(RoundTrace {
        t,
        eta,
        sigma_t,
        k_star: decision.k_star,
        scheduled: decision.scheduled.clone(),
        transmitted: outcome.transmit,
        snr,
        penalty: (decision.k_star >= 1).then(|| coeffs.penalty(decision.k_star)),
        penalty_all: coeffs.penalty(n_dev),
        v_values: decision.v_values,
        objective: decision.objective,
        unified_energy: state.ledger.unified_usage(t, hp.rounds),
        devices: records,
        loss: None,
        accuracy: None,
    })
}
