use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use oafel_core::scheduler::Policy;
use oafel_harness::{run_and_emit, ExperimentSpec, HarnessError, Overrides};

/// Over-the-air federated edge learning simulator.
#[derive(Debug, Parser)]
#[command(name = "oafel", version)]
struct Cli {
    /// Experiment file (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the file's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Drift-plus-penalty weight.
    #[arg(long = "V")]
    v: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    obs_error: Option<f64>,
}

fn threads_from_env() -> Result<usize, HarnessError> {
    match std::env::var("OAFEL_THREADS") {
        Err(_) => Ok(0),
        Ok(s) => s.trim().parse().map_err(|_| HarnessError::Spec(format!("OAFEL_THREADS must be an integer, got `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let threads = threads_from_env()?;
    if threads > 0 {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let overrides = Overrides {
        seed: cli.seed,
        policy: cli.policy,
        out: cli.out,
        rounds: cli.rounds,
        v: cli.v,
        gamma0: cli.gamma0,
        obs_error: cli.obs_error,
    };
    let spec = ExperimentSpec::from_path(&cli.config, &overrides)?;
    let (runs, agg) = run_and_emit(&spec)?;
    for r in &runs {
        let s = &r.summary;
        println!(
            "seed {:>4}  policy {}  loss {}  acc {}  unified {:.4}  sched {:.3}  cap {}",
            s.seed,
            s.policy,
            s.final_loss.map_or("-".into(), |x| format!("{x:.5}")),
            s.final_accuracy.map_or("-".into(), |x| format!("{x:.4}")),
            s.unified_energy_final,
            s.scheduled_fraction,
            if s.flags.energy_cap_holds { "ok" } else { "VIOLATED" },
        );
    }
    if runs.len() > 1 {
        println!(
            "mean      loss {}  acc {}  unified {:.4}",
            agg.mean_final_loss.map_or("-".into(), |x| format!("{x:.5}")),
            agg.mean_final_accuracy.map_or("-".into(), |x| format!("{x:.4}")),
            agg.mean_unified_energy_final,
        );
    }
    println!("wrote {}", spec.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
