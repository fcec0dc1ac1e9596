use oafel_core::analysis::{
    check_queue_identities, ledger_discrepancy, theorem1_bound, theorem1_sequences, theorem2_report, Theorem2Report,
};
use oafel_core::channel::Rayleigh;
use oafel_core::learner::{estimate_variance_bound, partition_dataset, Dataset, LossModel, Partition, Shard};
use oafel_core::rng::derive_stream;
use oafel_core::scheduler::{run_round, Environment, Policy, RoundTrace, SimulationState};
use rayon::prelude::*;
use serde::Serialize;

use crate::spec::{ExperimentSpec, PreparedData};
use crate::HarnessError;

/// Probes per shard for the reported `G^2` estimate.
const VARIANCE_PROBES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatedConstants {
    /// Largest observed gradient-difference ratio; `None` before two
    /// rounds with computing devices.
    pub l_smooth: Option<f64>,
    /// Largest per-shard probe variance at the final model.
    pub g_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticReport {
    pub l_smooth: f64,
    pub mu: f64,
    pub g_sq: f64,
    pub f_star: f64,
    pub initial_gap: f64,
    pub final_gap: f64,
    /// `None` when the learning rate is outside the certified range.
    pub theorem1_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Flags {
    pub energy_cap_holds: bool,
    /// Whether the queue identities apply (zero queue floor).
    pub queue_identities_checked: bool,
    pub queue_identity_violations: usize,
    pub ledger_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub policy: Policy,
    pub rounds: usize,
    pub devices: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub energy_spent: Vec<f64>,
    pub energy_budget: Vec<f64>,
    pub unified_energy_final: f64,
    /// Scheduled device-rounds over `N * T`.
    pub scheduled_fraction: f64,
    pub transmitted_fraction: f64,
    pub energy_report: Theorem2Report,
    pub flags: Flags,
    pub estimated: EstimatedConstants,
    pub analytic: Option<AnalyticReport>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub traces: Vec<RoundTrace>,
    pub summary: RunSummary,
}

struct EvalSets {
    loss: Vec<usize>,
    accuracy: Option<Vec<usize>>,
}

fn eval_sets(spec: &ExperimentSpec) -> EvalSets {
    match &spec.data {
        PreparedData::Quadratic(q) => EvalSets { loss: q.data.all_indices(), accuracy: None },
        PreparedData::Mnist { train, test, .. } => {
            let k = spec.eval_subset.min(train.len());
            let mut rng = derive_stream(spec.data_seed, "eval", 0, 0);
            let mut loss = rand::seq::index::sample(&mut rng, train.len(), k).into_vec();
            loss.sort_unstable();
            EvalSets { loss, accuracy: Some(test.all_indices()) }
        }
    }
}

fn partition_for(spec: &ExperimentSpec, seed: u64) -> Result<(Partition, &Dataset), HarnessError> {
    Ok(match &spec.data {
        PreparedData::Quadratic(q) => (q.partition.clone(), &q.data),
        PreparedData::Mnist { train, .. } => {
            let n = spec.config.hyper.devices;
            let p = partition_dataset(train, n, spec.partition, &mut derive_stream(seed, "partition", 0, 0))?;
            (p, train)
        }
    })
}

fn evaluate(model: &LossModel, spec: &ExperimentSpec, sets: &EvalSets, w: &[f64]) -> (f64, Option<f64>) {
    match &spec.data {
        PreparedData::Quadratic(q) => (model.mean_loss(w, &q.data, &sets.loss), None),
        PreparedData::Mnist { train, test, .. } => {
            let loss = model.mean_loss(w, train, &sets.loss);
            let acc = sets.accuracy.as_ref().and_then(|idx| model.accuracy(w, test, idx));
            (loss, acc)
        }
    }
}

/// Runs one seed end to end: initialization reports, `T` rounds, analysis.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedRun, HarnessError> {
    let hp = &spec.config.hyper;
    let model = spec.data.loss_model();
    let (partition, data) = partition_for(spec, seed)?;
    let shards: Vec<Shard<'_>> = (0..hp.devices).map(|n| partition.shard(data, n)).collect();
    let env = Environment {
        model: &model,
        data,
        shards: shards.clone(),
        hyper: hp,
        devices: &spec.config.devices,
        fading: Rayleigh { scale: spec.fading_scale },
        obs_error: spec.obs_error,
        seed,
    };
    let sets = eval_sets(spec);
    let mut state = SimulationState::new(&env)?;
    let w0 = state.w.clone();
    let mut traces = Vec::with_capacity(hp.rounds);
    for t in 1..=hp.rounds {
        let mut trace = run_round(&env, &mut state, spec.policy)?;
        if t % spec.eval_every == 0 || t == hp.rounds {
            let (loss, acc) = evaluate(&model, spec, &sets, state.w.as_slice());
            trace.loss = Some(loss);
            trace.accuracy = acc;
        }
        traces.push(trace);
    }

    let budgets: Vec<f64> = spec.config.devices.iter().map(|d| d.budget).collect();
    let energy_report = theorem2_report(&traces, hp.penalty_weight, &budgets)?;
    let queue_identities_checked = hp.q_min == 0.0;
    let flags = Flags {
        energy_cap_holds: energy_report.energy_cap_holds.iter().all(|&b| b),
        queue_identities_checked,
        queue_identity_violations: if queue_identities_checked {
            check_queue_identities(&traces, 1e-12).len()
        } else {
            0
        },
        ledger_discrepancy: ledger_discrepancy(&traces, state.ledger.spent()),
    };

    let g_sq_est = shards
        .iter()
        .enumerate()
        .map(|(n, shard)| {
            let probes = VARIANCE_PROBES.min(shard.len()).max(2);
            estimate_variance_bound(&model, shard, &state.w, probes, &mut derive_stream(seed, "variance", n, 0))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let estimated = EstimatedConstants { l_smooth: state.smoothness.estimate(), g_sq: g_sq_est };

    let analytic = match &spec.data {
        PreparedData::Quadratic(q) => {
            let (eta, a) = theorem1_sequences(&traces, hp);
            let initial_gap = q.gap(w0.as_slice());
            Some(AnalyticReport {
                l_smooth: q.l_smooth,
                mu: q.mu,
                g_sq: hp.g_sq,
                f_star: q.f_star,
                initial_gap,
                final_gap: q.gap(state.w.as_slice()),
                theorem1_bound: theorem1_bound(initial_gap, q.mu, &eta, &a, q.l_smooth).ok(),
            })
        }
        PreparedData::Mnist { .. } => None,
    };

    let last = traces.last().expect("at least one round");
    let device_rounds = (hp.devices * hp.rounds) as f64;
    let summary = RunSummary {
        seed,
        policy: spec.policy,
        rounds: hp.rounds,
        devices: hp.devices,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        energy_spent: state.ledger.spent().to_vec(),
        energy_budget: budgets,
        unified_energy_final: last.unified_energy,
        scheduled_fraction: traces.iter().map(|t| t.scheduled.len()).sum::<usize>() as f64 / device_rounds,
        transmitted_fraction: traces.iter().map(|t| t.transmitted.len()).sum::<usize>() as f64 / device_rounds,
        energy_report,
        flags,
        estimated,
        analytic,
    };
    Ok(SeedRun { seed, traces, summary })
}

/// Runs every configured seed in parallel, returning runs in seed-list order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<SeedRun>, HarnessError> {
    spec.seeds.par_iter().map(|&seed| run_seed(spec, seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub policy: Policy,
    pub seeds: Vec<u64>,
    pub mean_final_loss: Option<f64>,
    pub mean_final_accuracy: Option<f64>,
    pub mean_unified_energy_final: f64,
    pub max_unified_energy_final: f64,
    pub mean_scheduled_fraction: f64,
    pub energy_cap_holds_all: bool,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate(runs: &[SeedRun]) -> Aggregate {
    let n = runs.len().max(1) as f64;
    Aggregate {
        policy: runs.first().map_or(Policy::Dynamic, |r| r.summary.policy),
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_final_loss: mean_opt(runs.iter().map(|r| r.summary.final_loss)),
        mean_final_accuracy: mean_opt(runs.iter().map(|r| r.summary.final_accuracy)),
        mean_unified_energy_final: runs.iter().map(|r| r.summary.unified_energy_final).sum::<f64>() / n,
        max_unified_energy_final: runs.iter().map(|r| r.summary.unified_energy_final).fold(0.0, f64::max),
        mean_scheduled_fraction: runs.iter().map(|r| r.summary.scheduled_fraction).sum::<f64>() / n,
        energy_cap_holds_all: runs.iter().all(|r| r.summary.flags.energy_cap_holds),
    }
}
