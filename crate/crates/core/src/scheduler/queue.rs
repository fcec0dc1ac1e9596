use serde::{Deserialize, Serialize};

/// `max(q + consumed - share, q_min)`.
///
/// `consumed` is the energy the device actually spent in the round; for a
/// device that neither computed nor transmitted it is zero, which gives the
/// `beta = 0` drain.
pub fn queue_update(q: f64, consumed: f64, budget_share: f64, q_min: f64) -> f64 {
    (q + consumed - budget_share).max(q_min)
}

/// Per-device virtual energy queues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualQueue {
    q: Vec<f64>,
    q_min: f64,
}

impl VirtualQueue {
    /// All queues start at the floor `q_min`.
    pub fn new(devices: usize, q_min: f64) -> Self {
        assert!(q_min >= 0.0, "q_min must be non-negative");
        Self { q: vec![q_min; devices], q_min }
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, n: usize) -> f64 {
        self.q[n]
    }

    pub fn q_min(&self) -> f64 {
        self.q_min
    }

    pub fn devices(&self) -> usize {
        self.q.len()
    }

    /// Applies [`queue_update`] to every device.
    pub fn update(&mut self, consumed: &[f64], budget_shares: &[f64]) {
        assert_eq!(consumed.len(), self.q.len());
        assert_eq!(budget_shares.len(), self.q.len());
        for ((q, &e), &share) in self.q.iter_mut().zip(consumed).zip(budget_shares) {
            *q = queue_update(*q, e, share, self.q_min);
        }
    }
}

/// One device's energy for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub round: usize,
    pub device: usize,
    pub e_cp: f64,
    pub e_tr: f64,
    pub e_est: f64,
}

impl EnergyRecord {
    pub fn total(&self) -> f64 {
        self.e_cp + self.e_tr
    }
}

/// Cumulative energy per device against its total budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    spent: Vec<f64>,
    budget: Vec<f64>,
    records: Vec<EnergyRecord>,
}

impl EnergyLedger {
    pub fn new(budget: Vec<f64>) -> Self {
        Self { spent: vec![0.0; budget.len()], budget, records: Vec::new() }
    }

    pub fn charge(&mut self, record: EnergyRecord) {
        debug_assert!(record.e_cp >= 0.0 && record.e_tr >= 0.0);
        self.spent[record.device] += record.total();
        self.records.push(record);
    }

    pub fn spent(&self) -> &[f64] {
        &self.spent
    }

    pub fn budget(&self) -> &[f64] {
        &self.budget
    }

    pub fn remaining(&self, n: usize) -> f64 {
        self.budget[n] - self.spent[n]
    }

    pub fn records(&self) -> &[EnergyRecord] {
        &self.records
    }

    /// `max_n spent_n / (t * E_bar_n / T)` after round `t`.
    pub fn unified_usage(&self, t: usize, rounds: usize) -> f64 {
        let frac = t as f64 / rounds as f64;
        self.spent
            .iter()
            .zip(&self.budget)
            .map(|(s, b)| s / (frac * b))
            .fold(0.0, f64::max)
    }
}
