//! Experiment orchestration for the `oafel` simulator: configuration files,
//! dataset ingestion, multi-seed runs and metrics files.

use std::io;
use std::path::{Path, PathBuf};

use oafel_core::analysis::AnalysisError;
use oafel_core::config::ConfigError;
use oafel_core::learner::LearnerError;
use oafel_core::scheduler::SchedulerError;
use thiserror::Error;

pub mod experiment;
pub mod metrics;
pub mod mnist;
pub mod spec;
pub mod synth;

pub use experiment::{aggregate, run_experiment, run_seed, Aggregate, RunSummary, SeedRun};
pub use metrics::{emit_metrics, write_csv};
pub use mnist::load_mnist_idx;
pub use spec::{ExperimentSpec, Overrides, PreparedData};
pub use synth::{synth_quadratic, QuadraticSpec, SynthQuadratic};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl HarnessError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        HarnessError::IoFailure { path: path.to_path_buf(), source }
    }
}

/// Runs every seed, writes per-seed files and `aggregate.json` under the
/// spec's output directory.
pub fn run_and_emit(spec: &ExperimentSpec) -> Result<(Vec<SeedRun>, Aggregate), HarnessError> {
    let runs = run_experiment(spec)?;
    for run in &runs {
        emit_metrics(run, &spec.out)?;
    }
    let agg = aggregate(&runs);
    metrics::write_json(&agg, &spec.out.join("aggregate.json"))?;
    Ok((runs, agg))
}
