use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SchedulerError;
use crate::config::Rescheduling;

/// Largest device count accepted by [`brute_force_schedule`].
pub const BRUTE_FORCE_MAX_DEVICES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Estimated drift-plus-penalty minimization.
    Dynamic,
    /// Schedule when the estimate fits the remaining per-round budget.
    Myopic,
    /// Every device every round.
    All,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Dynamic => "dynamic",
            Policy::Myopic => "myopic",
            Policy::All => "all",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(Policy::Dynamic),
            "myopic" => Ok(Policy::Myopic),
            "all" => Ok(Policy::All),
            other => Err(format!("unknown policy `{other}` (expected dynamic, myopic or all)")),
        }
    }
}

/// Everything the per-round penalty `U_t(k)` depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCoeffs {
    pub v: f64,
    pub l_smooth: f64,
    pub eta: f64,
    pub g_sq: f64,
    pub batch_size: usize,
    pub sigma0_sq: f64,
    pub dim: usize,
    pub sigma_t: f64,
}

impl PenaltyCoeffs {
    /// `U_t(k) = (l eta^2 / 2) (G^2 / (L_b k) + sigma0^2 s / (sigma_t^2 k^2))`.
    pub fn penalty(&self, k: usize) -> f64 {
        assert!(k >= 1);
        let k = k as f64;
        0.5 * self.l_smooth
            * self.eta
            * self.eta
            * (self.g_sq / (self.batch_size as f64 * k)
                + self.sigma0_sq * self.dim as f64 / (self.sigma_t * self.sigma_t * k * k))
    }

    /// `V * U_t(k)`.
    pub fn weighted_penalty(&self, k: usize) -> f64 {
        self.v * self.penalty(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDecision {
    pub beta: Vec<bool>,
    /// Scheduled devices in ascending index order.
    pub scheduled: Vec<usize>,
    pub sigma_t: f64,
    pub e_est: Vec<f64>,
    pub k_star: usize,
    /// `v_t(1..=N)`; empty for policies that do not evaluate it.
    pub v_values: Vec<f64>,
    /// `V U_t(|B|) + sum_{n in B} q_n E_est_n`, when evaluated.
    pub objective: Option<f64>,
}

impl RoundDecision {
    fn from_set(mut scheduled: Vec<usize>, sigma_t: f64, e_est: &[f64]) -> Self {
        scheduled.sort_unstable();
        let mut beta = vec![false; e_est.len()];
        for &n in &scheduled {
            beta[n] = true;
        }
        Self {
            beta,
            k_star: scheduled.len(),
            scheduled,
            sigma_t,
            e_est: e_est.to_vec(),
            v_values: Vec::new(),
            objective: None,
        }
    }
}

/// Device indices ordered by drift `q_n * E_est_n` ascending, ties by index.
pub fn drift_order(queues: &[f64], e_est: &[f64]) -> Vec<(usize, f64)> {
    let mut drift: Vec<(usize, f64)> =
        queues.iter().zip(e_est).map(|(q, e)| q * e).enumerate().collect();
    drift.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    drift
}

/// Minimizes `V U_t(k) + sum of the k smallest drifts` over `k = 1..=N`.
pub fn schedule_round(queues: &[f64], e_est: &[f64], coeffs: &PenaltyCoeffs) -> RoundDecision {
    assert_eq!(queues.len(), e_est.len());
    assert!(!queues.is_empty(), "at least one device is required");
    assert!(coeffs.sigma_t > 0.0);
    let order = drift_order(queues, e_est);
    let mut prefix = 0.0;
    let mut v_values = Vec::with_capacity(order.len());
    for (k, &(_, c)) in order.iter().enumerate() {
        prefix += c;
        v_values.push(coeffs.weighted_penalty(k + 1) + prefix);
    }
    let mut k_star = 1;
    for (k, &v) in v_values.iter().enumerate() {
        if v < v_values[k_star - 1] {
            k_star = k + 1;
        }
    }
    let set = order[..k_star].iter().map(|&(n, _)| n).collect();
    let mut decision = RoundDecision::from_set(set, coeffs.sigma_t, e_est);
    decision.objective = Some(v_values[k_star - 1]);
    decision.v_values = v_values;
    decision
}

/// Exhaustive minimization over all non-empty subsets.
pub fn brute_force_schedule(
    queues: &[f64],
    e_est: &[f64],
    coeffs: &PenaltyCoeffs,
) -> Result<RoundDecision, SchedulerError> {
    let n = queues.len();
    assert_eq!(n, e_est.len());
    if n > BRUTE_FORCE_MAX_DEVICES {
        return Err(SchedulerError::TooManyDevices(n));
    }
    if n == 0 {
        return Err(SchedulerError::NoDevices);
    }
    let drift: Vec<f64> = queues.iter().zip(e_est).map(|(q, e)| q * e).collect();
    let mut best: Option<(u32, f64)> = None;
    for mask in 1u32..(1u32 << n) {
        let k = mask.count_ones() as usize;
        let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| drift[i]).sum();
        let obj = coeffs.weighted_penalty(k) + sum;
        if best.is_none_or(|(_, b)| obj < b) {
            best = Some((mask, obj));
        }
    }
    let (mask, obj) = best.expect("non-empty enumeration");
    let set = (0..n).filter(|i| mask >> i & 1 == 1).collect();
    let mut decision = RoundDecision::from_set(set, coeffs.sigma_t, e_est);
    decision.objective = Some(obj);
    Ok(decision)
}

/// Schedules device `n` iff `E_est_n <= (E_bar_n - spent_n) / (T - t + 1)`.
pub fn myopic_schedule(
    budget: &[f64],
    spent: &[f64],
    e_est: &[f64],
    sigma_t: f64,
    t: usize,
    rounds: usize,
) -> RoundDecision {
    assert!(t >= 1 && t <= rounds, "round {t} outside 1..={rounds}");
    let remaining_rounds = (rounds - t + 1) as f64;
    let set = (0..e_est.len())
        .filter(|&n| e_est[n] <= (budget[n] - spent[n]) / remaining_rounds)
        .collect();
    RoundDecision::from_set(set, sigma_t, e_est)
}

/// Every device.
pub fn all_schedule(e_est: &[f64], sigma_t: f64) -> RoundDecision {
    RoundDecision::from_set((0..e_est.len()).collect(), sigma_t, e_est)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RescheduleOutcome {
    /// Scheduled devices that go on to transmit.
    pub transmit: Vec<usize>,
    /// Scheduled devices whose realized energy exceeded the estimate by more
    /// than the tolerance.
    pub backed_off: Vec<usize>,
}

/// Splits the scheduled set by `E - E_est <= delta_h`.
pub fn reschedule_filter(
    decision: &RoundDecision,
    e_actual: &BTreeMap<usize, f64>,
    rescheduling: Rescheduling,
) -> RescheduleOutcome {
    let mut out = RescheduleOutcome::default();
    for &n in &decision.scheduled {
        let est = decision.e_est[n];
        let gap = e_actual[&n] - est;
        if gap <= rescheduling.tolerance(est) {
            out.transmit.push(n);
        } else {
            out.backed_off.push(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// V = 1, l eta^2 / 2 = 1, G^2 / L_b = 1, sigma0^2 s / sigma^2 = 1.
    fn unit_coeffs() -> PenaltyCoeffs {
        PenaltyCoeffs {
            v: 1.0,
            l_smooth: 2.0,
            eta: 1.0,
            g_sq: 64.0,
            batch_size: 64,
            sigma0_sq: 1.0,
            dim: 1,
            sigma_t: 1.0,
        }
    }

    #[test]
    fn hand_evaluated_three_devices() {
        // Drifts 0.5, 2.0, 0.1 in device order.
        let q = [1.0, 1.0, 1.0];
        let e = [0.5, 2.0, 0.1];
        let d = schedule_round(&q, &e, &unit_coeffs());
        let v1 = 1.0 + 1.0 + 0.1;
        let v2 = 0.5 + 0.25 + 0.6;
        let v3 = 1.0 / 3.0 + 1.0 / 9.0 + 2.6;
        for (got, want) in d.v_values.iter().zip([v1, v2, v3]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((d.v_values[2] - 3.0444).abs() < 1e-4);
        assert_eq!(d.k_star, 2);
        assert_eq!(d.scheduled, vec![0, 2]);
        assert_eq!(d.beta, vec![true, false, true]);

        let oracle = brute_force_schedule(&q, &e, &unit_coeffs()).unwrap();
        assert_eq!(oracle.scheduled, d.scheduled);
        assert!((oracle.objective.unwrap() - 1.35).abs() < 1e-12);
    }

    #[test]
    fn zero_drift_schedules_everyone() {
        let d = schedule_round(&[0.0; 5], &[3.0; 5], &unit_coeffs());
        assert_eq!(d.k_star, 5);
    }

    #[test]
    fn single_device_always_scheduled() {
        let d = schedule_round(&[1e9], &[1e9], &unit_coeffs());
        assert_eq!(d.scheduled, vec![0]);
        let b = brute_force_schedule(&[1e9], &[1e9], &unit_coeffs()).unwrap();
        assert_eq!(b.scheduled, vec![0]);
    }

    #[test]
    fn drift_ties_prefer_lower_index() {
        let d = schedule_round(&[1.0, 1.0, 1.0], &[5.0, 5.0, 5.0], &unit_coeffs());
        // v(1) = 2 + 5 = 7, v(2) = 0.75 + 10: one device, the first.
        assert_eq!(d.scheduled, vec![0]);
    }

    #[test]
    fn argmin_ties_prefer_smaller_k() {
        // v(1) = 2 + 0 and v(2) = 0.75 + 1.25 are equal.
        let d = schedule_round(&[1.0, 1.0], &[0.0, 1.25], &unit_coeffs());
        assert_eq!(d.v_values[0], d.v_values[1]);
        assert_eq!(d.k_star, 1);
    }

    #[test]
    fn oversized_brute_force_rejected() {
        let q = vec![1.0; 21];
        assert_eq!(
            brute_force_schedule(&q, &q, &unit_coeffs()),
            Err(SchedulerError::TooManyDevices(21))
        );
    }

    #[test]
    fn myopic_cases() {
        let d = myopic_schedule(&[200.0], &[0.0], &[1.2], 1.0, 1, 200);
        assert!(d.scheduled.is_empty());
        let d = myopic_schedule(&[200.0], &[0.0], &[1.0], 1.0, 1, 200);
        assert_eq!(d.scheduled, vec![0]);
        let d = myopic_schedule(&[200.0], &[200.0], &[1e-9], 1.0, 50, 200);
        assert!(d.scheduled.is_empty());
    }

    #[test]
    fn rescheduling_threshold() {
        let decision = all_schedule(&[2.0, 2.0, 2.0], 1.0);
        let actual = BTreeMap::from([(0, 2.9), (1, 3.1), (2, 1.0)]);
        let out = reschedule_filter(&decision, &actual, Rescheduling::Relative(0.5));
        assert_eq!(out.transmit, vec![0, 2]);
        assert_eq!(out.backed_off, vec![1]);
        let none = reschedule_filter(&decision, &actual, Rescheduling::Disabled);
        assert!(none.backed_off.is_empty());
    }

    #[test]
    fn policy_round_trip() {
        for p in [Policy::Dynamic, Policy::Myopic, Policy::All] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("greedy".parse::<Policy>().is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, PenaltyCoeffs)> {
        (1usize..=12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..5.0, n),
                prop::collection::vec(0.01f64..10.0, n),
                0.01f64..100.0,
                0.1f64..10.0,
                0.001f64..1.0,
                0.0f64..50.0,
                1usize..128,
                1e-6f64..1.0,
                1usize..1000,
                1e-3f64..10.0,
            )
                .prop_map(|(q, e, v, l, eta, g_sq, batch, s0, dim, sigma)| {
                    let c = PenaltyCoeffs {
                        v,
                        l_smooth: l,
                        eta,
                        g_sq,
                        batch_size: batch,
                        sigma0_sq: s0,
                        dim,
                        sigma_t: sigma,
                    };
                    (q, e, c)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn matches_exhaustive_search((q, e, c) in instance()) {
            let fast = schedule_round(&q, &e, &c);
            let slow = brute_force_schedule(&q, &e, &c).unwrap();
            let (a, b) = (fast.objective.unwrap(), slow.objective.unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }

        #[test]
        fn schedule_is_drift_prefix((q, e, c) in instance()) {
            let d = schedule_round(&q, &e, &c);
            let order = drift_order(&q, &e);
            let mut prefix: Vec<usize> = order[..d.k_star].iter().map(|p| p.0).collect();
            prefix.sort_unstable();
            prop_assert_eq!(&prefix, &d.scheduled);
            prop_assert_eq!(d.beta.iter().filter(|b| **b).count(), d.k_star);
            prop_assert!(d.k_star >= 1);
        }
    }
}
