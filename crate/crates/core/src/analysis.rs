//! Convergence and energy certificates evaluated on simulated traces.
//!
//! Bound checks are meaningful only when `l`, `mu`, `G^2` and `F*` are known
//! exactly, i.e. for the quadratic model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::sample_noise;
use crate::config::Hyperparams;
use crate::learner::{global_full_gradient, local_gradient, Dataset, LearnerError, LossModel, Shard};
use crate::otaa::{aggregate, Upload};
use crate::rng::derive_stream;
use crate::scheduler::RoundTrace;
use crate::vector::{dot, ModelVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("learning rate {eta} at round {round} exceeds min(1/l, 1) = {limit}")]
    LearningRateTooLarge { round: usize, eta: f64, limit: f64 },
    #[error("strong convexity constant must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("sequence lengths differ: {0} learning rates, {1} A terms")]
    LengthMismatch(usize, usize),
    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),
    #[error("offline search limited to T <= {max_rounds} and N <= {max_devices}")]
    SearchTooLarge { max_rounds: usize, max_devices: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Inputs of the single-round bound that describe the round itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTerms {
    pub eta: f64,
    pub g_sq: f64,
    pub batch_size: usize,
    pub scheduled: usize,
    pub sigma_t: f64,
    pub sigma0_sq: f64,
    pub dim: usize,
}

impl RoundTerms {
    /// `G^2 / (L_b |B|) + sigma0^2 s / (sigma_t^2 |B|^2)`.
    pub fn variance_terms(&self) -> f64 {
        assert!(self.scheduled >= 1 && self.sigma_t > 0.0);
        let b = self.scheduled as f64;
        self.g_sq / (self.batch_size as f64 * b)
            + self.sigma0_sq * self.dim as f64 / (self.sigma_t * self.sigma_t * b * b)
    }

    /// `A_t = (eta / 2) * variance_terms`.
    pub fn a_term(&self) -> f64 {
        0.5 * self.eta * self.variance_terms()
    }
}

/// `-eta (1 - l eta / 2) ||g||^2 + (l eta^2 / 2) * variance_terms`.
pub fn lemma1_bound(terms: &RoundTerms, l_smooth: f64, g_norm_sq: f64) -> f64 {
    let eta = terms.eta;
    -eta * (1.0 - l_smooth * eta / 2.0) * g_norm_sq + 0.5 * l_smooth * eta * eta * terms.variance_terms()
}

/// `F0_gap prod(1 - mu eta_i) + sum_{i<T} A_i prod_{j>i}(1 - mu eta_j) + A_T`.
///
/// Rounds without a global update should be passed with `eta = 0`, `A = 0`.
pub fn theorem1_bound(f0_gap: f64, mu: f64, eta: &[f64], a: &[f64], l_smooth: f64) -> Result<f64, AnalysisError> {
    if mu.is_nan() || mu <= 0.0 {
        return Err(AnalysisError::NonPositiveMu(mu));
    }
    if eta.len() != a.len() {
        return Err(AnalysisError::LengthMismatch(eta.len(), a.len()));
    }
    let limit = (1.0 / l_smooth).min(1.0);
    if let Some((i, &e)) = eta.iter().enumerate().find(|(_, &e)| e > limit) {
        return Err(AnalysisError::LearningRateTooLarge { round: i + 1, eta: e, limit });
    }
    // Forward recursion: gap_t <= (1 - mu eta_t) gap_{t-1} + A_t.
    Ok(eta.iter().zip(a).fold(f0_gap, |gap, (&e, &a_t)| (1.0 - mu * e) * gap + a_t))
}

/// Per-round `(eta_t, A_t)` from a trace, with `|B_t|` the transmitting set.
pub fn theorem1_sequences(traces: &[RoundTrace], hyper: &Hyperparams) -> (Vec<f64>, Vec<f64>) {
    traces
        .iter()
        .map(|tr| {
            if tr.transmitted.is_empty() {
                return (0.0, 0.0);
            }
            let terms = RoundTerms {
                eta: tr.eta,
                g_sq: hyper.g_sq,
                batch_size: hyper.batch_size,
                scheduled: tr.transmitted.len(),
                sigma_t: tr.sigma_t,
                sigma0_sq: hyper.sigma0_sq,
                dim: hyper.dim,
            };
            (tr.eta, terms.a_term())
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Constants {
    pub delta_0: f64,
    pub theta_n: Vec<f64>,
    pub theta_0: f64,
}

impl Theorem2Constants {
    pub fn from_parts(delta_0: f64, theta_n: Vec<f64>) -> Self {
        let theta_0 = theta_n.iter().map(|t| t * t).sum::<f64>() / 2.0;
        Self { delta_0, theta_n, theta_0 }
    }

    pub fn theta_sum(&self) -> f64 {
        self.theta_n.iter().sum()
    }

    /// `theta_0 T^2 + T (T - 1) delta_0 sum theta_n`.
    pub fn slack_numerator(&self, rounds: usize) -> f64 {
        let t = rounds as f64;
        self.theta_0 * t * t + t * (t - 1.0) * self.delta_0 * self.theta_sum()
    }
}

/// `delta_0` over scheduled pairs `|E_est - E|`, `theta_n = max_t |E - E_bar/T|`
/// with `E` the energy the device consumed.
pub fn theorem2_constants(traces: &[RoundTrace]) -> Result<Theorem2Constants, AnalysisError> {
    let first = traces.first().ok_or_else(|| AnalysisError::IncompleteTrace("no rounds".into()))?;
    let n = first.devices.len();
    let mut delta_0: f64 = 0.0;
    let mut theta = vec![0.0f64; n];
    for (i, tr) in traces.iter().enumerate() {
        if tr.t != i + 1 {
            return Err(AnalysisError::IncompleteTrace(format!("expected round {}, found {}", i + 1, tr.t)));
        }
        if tr.devices.len() != n {
            return Err(AnalysisError::IncompleteTrace(format!("round {} has {} devices", tr.t, tr.devices.len())));
        }
        for (k, d) in tr.devices.iter().enumerate() {
            if d.scheduled {
                let e = d.e_full.ok_or_else(|| {
                    AnalysisError::IncompleteTrace(format!("device {k} scheduled in round {} without energy", tr.t))
                })?;
                delta_0 = delta_0.max((d.e_est - e).abs());
            }
            theta[k] = theta[k].max((d.consumed() - d.budget_share).abs());
        }
    }
    Ok(Theorem2Constants::from_parts(delta_0, theta))
}

/// `E_bar_n + sqrt(2 V sum U + 2 theta_0 T^2 + 2 T (T-1) delta_0 sum theta_n)`.
pub fn theorem2_energy_bound(c: &Theorem2Constants, v: f64, u_sum: f64, rounds: usize, budget: f64) -> f64 {
    budget + (2.0 * v * u_sum + 2.0 * c.slack_numerator(rounds)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub constants: Theorem2Constants,
    /// `sum_t U_t` of the run itself, the surrogate for the offline optimum
    /// in the energy cap.
    pub u_sum_run: f64,
    /// `sum_t U_t(N)`, a lower surrogate for the offline optimum.
    pub u_sum_all: f64,
    pub energy_spent: Vec<f64>,
    pub energy_cap: Vec<f64>,
    pub energy_cap_holds: Vec<bool>,
    /// Largest `(cap - E_bar_n) / E_bar_n`.
    pub cap_slack: f64,
    /// Left and right side of the cumulative-penalty certificate with the
    /// lower surrogate plugged in.
    pub regret_lhs: f64,
    pub regret_rhs: f64,
}

/// Energy caps and the cumulative-penalty certificate for one trace.
pub fn theorem2_report(traces: &[RoundTrace], v: f64, budgets: &[f64]) -> Result<Theorem2Report, AnalysisError> {
    let constants = theorem2_constants(traces)?;
    let rounds = traces.len();
    let u_sum_run: f64 = traces.iter().filter_map(|t| t.penalty).sum();
    let u_sum_all: f64 = traces.iter().map(|t| t.penalty_all).sum();
    let n = budgets.len();
    let mut energy_spent = vec![0.0; n];
    for tr in traces {
        for (k, d) in tr.devices.iter().enumerate() {
            energy_spent[k] += d.consumed();
        }
    }
    let energy_cap: Vec<f64> =
        budgets.iter().map(|&b| theorem2_energy_bound(&constants, v, u_sum_run, rounds, b)).collect();
    let energy_cap_holds = energy_spent.iter().zip(&energy_cap).map(|(s, c)| s <= c).collect();
    let cap_slack =
        energy_cap.iter().zip(budgets).map(|(c, b)| (c - b) / b).fold(0.0, f64::max);
    Ok(Theorem2Report {
        regret_lhs: u_sum_run,
        regret_rhs: u_sum_all + constants.slack_numerator(rounds) / v,
        constants,
        u_sum_run,
        u_sum_all,
        energy_spent,
        energy_cap,
        energy_cap_holds,
        cap_slack,
    })
}

pub const OFFLINE_MAX_ROUNDS: usize = 6;
pub const OFFLINE_MAX_DEVICES: usize = 4;

/// Exact offline minimum of `sum_t U_t(|B_t|)` subject to
/// `sum_t beta_{n,t} E_{n,t} <= E_bar_n` with `|B_t| >= 1`, by exhaustive
/// search. `penalty[t][k - 1] = U_t(k)`, `energy[t][n] = E_{n,t}`.
/// Returns `None` when no feasible schedule exists.
pub fn offline_optimum(
    penalty: &[Vec<f64>],
    energy: &[Vec<f64>],
    budgets: &[f64],
) -> Result<Option<f64>, AnalysisError> {
    let rounds = penalty.len();
    let n = budgets.len();
    if rounds > OFFLINE_MAX_ROUNDS || n > OFFLINE_MAX_DEVICES {
        return Err(AnalysisError::SearchTooLarge {
            max_rounds: OFFLINE_MAX_ROUNDS,
            max_devices: OFFLINE_MAX_DEVICES,
        });
    }
    fn search(t: usize, penalty: &[Vec<f64>], energy: &[Vec<f64>], left: &mut [f64], best: &mut Option<f64>, acc: f64) {
        if best.is_some_and(|b| acc >= b) {
            return;
        }
        if t == penalty.len() {
            *best = Some(acc);
            return;
        }
        let n = left.len();
        for mask in 1u32..(1 << n) {
            let fits = (0..n).all(|k| mask >> k & 1 == 0 || energy[t][k] <= left[k]);
            if !fits {
                continue;
            }
            for k in (0..n).filter(|k| mask >> k & 1 == 1) {
                left[k] -= energy[t][k];
            }
            let size = mask.count_ones() as usize;
            search(t + 1, penalty, energy, left, best, acc + penalty[t][size - 1]);
            for k in (0..n).filter(|k| mask >> k & 1 == 1) {
                left[k] += energy[t][k];
            }
        }
    }
    let mut best = None;
    search(0, penalty, energy, &mut budgets.to_vec(), &mut best, 0.0);
    Ok(best)
}

/// `||g||^2 >= 2 mu (F(w) - F*) - 1e-9`.
pub fn pl_check(g_norm_sq: f64, mu: f64, f_gap: f64) -> bool {
    g_norm_sq >= 2.0 * mu * f_gap - 1e-9
}

/// `F(v) - F(w) <= grad F(w)^T (v - w) + l/2 ||v - w||^2` within 1e-9.
pub fn smoothness_check(l_smooth: f64, w: &[f64], v: &[f64], f_w: f64, f_v: f64, grad_w: &[f64]) -> bool {
    let d: Vec<f64> = v.iter().zip(w).map(|(a, b)| a - b).collect();
    f_v - f_w <= dot(grad_w, &d) + 0.5 * l_smooth * dot(&d, &d) + 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityViolation {
    pub round: usize,
    pub device: usize,
    /// `q_{t+1}^2 - (q_t + y_t)^2` or `y_t - (q_{t+1} - q_t)`, whichever failed.
    pub excess: f64,
}

/// Checks `q_{t+1}^2 <= (q_t + y_t)^2` and `y_t <= q_{t+1} - q_t` on every
/// device-round, with `y_t = consumed - E_bar/T`. The first inequality only
/// holds with a zero floor.
pub fn check_queue_identities(traces: &[RoundTrace], tol: f64) -> Vec<IdentityViolation> {
    let mut out = Vec::new();
    for tr in traces {
        for (n, d) in tr.devices.iter().enumerate() {
            let y = d.consumed() - d.budget_share;
            let sq = d.q_next * d.q_next - (d.q + y).powi(2);
            let inc = y - (d.q_next - d.q);
            let excess = sq.max(inc);
            if excess > tol {
                out.push(IdentityViolation { round: tr.t, device: n, excess });
            }
        }
    }
    out
}

/// Largest `|spent_n - sum_t (E_cp + E_tr)|` against a final ledger.
pub fn ledger_discrepancy(traces: &[RoundTrace], spent: &[f64]) -> f64 {
    let mut totals = vec![0.0; spent.len()];
    for tr in traces {
        for (n, d) in tr.devices.iter().enumerate() {
            totals[n] += d.consumed();
        }
    }
    totals.iter().zip(spent).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Predicted-versus-realized comparison for a family of bound checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub label: String,
    pub predicted: Vec<f64>,
    pub realized: Vec<f64>,
    /// Allowed statistical excess per entry.
    pub tolerance: Vec<f64>,
    pub violations: Vec<usize>,
    /// `min(predicted - realized)`.
    pub min_slack: f64,
    pub mean_slack: f64,
}

impl BoundReport {
    pub fn compare(label: impl Into<String>, predicted: Vec<f64>, realized: Vec<f64>, tolerance: Vec<f64>) -> Self {
        assert_eq!(predicted.len(), realized.len());
        assert_eq!(predicted.len(), tolerance.len());
        let slack: Vec<f64> = predicted.iter().zip(&realized).map(|(p, r)| p - r).collect();
        let violations = slack.iter().zip(&tolerance).enumerate().filter(|(_, (s, t))| -**s > **t).map(|(i, _)| i).collect();
        let min_slack = slack.iter().copied().fold(f64::INFINITY, f64::min);
        let mean_slack = slack.iter().sum::<f64>() / slack.len().max(1) as f64;
        Self { label: label.into(), predicted, realized, tolerance, violations, min_slack, mean_slack }
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Outcome of a Monte-Carlo single-round check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCheck {
    pub bound: f64,
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

impl MonteCarloCheck {
    /// Mean within `z` standard errors of the bound.
    pub fn holds(&self, z: f64) -> bool {
        self.mean <= self.bound + z * self.std_err
    }
}

/// Repeats one round from fixed `w` with a fixed scheduled set, redrawing
/// mini-batches and receiver noise, and compares the mean loss change with
/// the single-round bound. `F` is the mean loss over the union of `shards`.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_monte_carlo(
    model: &LossModel,
    data: &Dataset,
    shards: &[Shard<'_>],
    w: &ModelVector,
    scheduled: &[usize],
    sigma_t: f64,
    hyper: &Hyperparams,
    draws: usize,
    seed: u64,
) -> Result<MonteCarloCheck, AnalysisError> {
    let all: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
    let f0 = model.mean_loss(w.as_slice(), data, &all);
    let g = global_full_gradient(model, shards, w);
    let eta = hyper.eta.at(1);
    let terms = RoundTerms {
        eta,
        g_sq: hyper.g_sq,
        batch_size: hyper.batch_size,
        scheduled: scheduled.len(),
        sigma_t,
        sigma0_sq: hyper.sigma0_sq,
        dim: hyper.dim,
    };
    let bound = lemma1_bound(&terms, hyper.l_smooth, g.norm_sq());
    let mut deltas = Vec::with_capacity(draws);
    for d in 0..draws {
        let grads = scheduled
            .iter()
            .map(|&n| local_gradient(model, w, &shards[n], hyper.batch_size, &mut derive_stream(seed, "mc_batch", n, d)))
            .collect::<Result<Vec<_>, _>>()?;
        let uploads: Vec<Upload<'_>> = scheduled
            .iter()
            .zip(&grads)
            .map(|(&n, r)| Upload { device: n, gradient: &r.effective_gradient, gain: 1.0 })
            .collect();
        let noise = sample_noise(hyper.dim, hyper.sigma0_sq, &mut derive_stream(seed, "mc_noise", 0, d));
        let out = aggregate(w, &uploads, sigma_t, eta, &noise).expect("scheduled set is non-empty");
        deltas.push(model.mean_loss(out.w_next.as_slice(), data, &all) - f0);
    }
    let n = draws as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloCheck { bound, mean, std_err: (var / n).sqrt(), draws })
}
