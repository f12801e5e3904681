//! `fame` — run continual-RL sequences, self-check the integration rules
//! against their brute-force oracles, aggregate metrics, and inspect
//! buffers.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fame_core::buffers::MetaRecord;
use fame_core::config::{Method, RunConfig};
use fame_core::flat::Checkpoint;
use fame_core::harness::{aggregate_metrics, load_run_dir, run_sequence, write_outputs};
use fame_core::oracle::{run_suite, OracleSuite};

#[derive(Parser)]
#[command(name = "fame", version, about = "Dual-learner continual RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one (method, seed) sequence from a TOML config and write CSVs
    /// plus per-task checkpoints.
    Run {
        /// Path to the run config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's method (fame-q, fame-kl, fame-wd, reset, finetune).
        #[arg(long)]
        method: Option<String>,
        /// Output directory; defaults to the config's out_dir or "runs/<run id>".
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a closed-form rule against its independent oracle on
    /// randomized instances.
    OracleCheck {
        /// One of: l2, wd, kl, w2-closed-form, all.
        suite: String,
        /// Randomized instances per suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate several run directories into a cross-method report
    /// (average performance, forward transfer vs the seed-matched reset
    /// baseline, forgetting).
    Metrics {
        /// Run directories produced by `fame run`.
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Report CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a checkpoint's meta buffer as CSV for inspection.
    DumpBuffer {
        /// A checkpoint_NNN.flat file written by `fame run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, seed, method, out } => cmd_run(config, seed, method, out),
        Command::OracleCheck { suite, instances, seed } => cmd_oracle(suite, instances, seed),
        Command::Metrics { runs, out } => cmd_metrics(runs, out),
        Command::DumpBuffer { checkpoint, out } => cmd_dump(checkpoint, out),
    }
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    method: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::load(&config)
        .with_context(|| format!("loading config {}", config.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(name) = method {
        cfg.method = Method::parse(&name)?;
    }
    let record = run_sequence(&cfg)?;
    let dir = out
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(record.run_id()));
    write_outputs(&record, &dir)?;
    println!(
        "run {} finished: avg_perf {:.4}, forgetting {:.4}; outputs in {}",
        record.run_id(),
        record.avg_perf,
        record.forgetting,
        dir.display()
    );
    for task in &record.tasks {
        println!(
            "  task {}: warm-up {} ({} eval + {} train steps)",
            task.task_index,
            task.chosen.label(),
            task.eval_steps_used,
            task.train_steps_used
        );
    }
    Ok(())
}

fn cmd_oracle(suite: String, instances: usize, seed: u64) -> Result<()> {
    let suites: Vec<OracleSuite> = if suite == "all" {
        vec![OracleSuite::L2, OracleSuite::Wd, OracleSuite::Kl, OracleSuite::W2ClosedForm]
    } else {
        vec![OracleSuite::parse(&suite)?]
    };
    let mut all_passed = true;
    for s in suites {
        let report = run_suite(s, instances, seed);
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "suite {:<14} {} instances, tolerance {:.0e}, max deviation {:.3e}: {}",
            s.label(),
            report.instances,
            s.tolerance(),
            report.max_deviation,
            verdict
        );
        if !report.passed() {
            println!("  failing seeds: {:?}", report.failing_seeds);
            all_passed = false;
        }
    }
    if !all_passed {
        bail!("oracle check failed");
    }
    Ok(())
}

fn cmd_metrics(runs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let loaded: Vec<_> = runs
        .iter()
        .map(|dir| load_run_dir(dir).with_context(|| format!("loading {}", dir.display())))
        .collect::<Result<_>>()?;
    let report = aggregate_metrics(&loaded)?;
    match out {
        Some(path) => {
            fame_core::flat::write_atomic(&path, &report)?;
            println!("report written to {}", path.display());
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn cmd_dump(checkpoint: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut csv = String::from("task_id,record,state,action\n");
    for task_id in ck.buffer.task_ids() {
        for rec in ck.buffer.task_records(task_id) {
            match rec {
                MetaRecord::Discrete { state, action } => {
                    csv.push_str(&format!("{task_id},discrete,{state},{action}\n"));
                }
                MetaRecord::Continuous { cell, action } => {
                    let a = action
                        .as_ref()
                        .map(|v| {
                            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
                        })
                        .unwrap_or_default();
                    csv.push_str(&format!("{task_id},continuous,{cell},{a}\n"));
                }
            }
        }
    }
    match out {
        Some(path) => {
            fame_core::flat::write_atomic(&path, &csv)?;
            println!("buffer dumped to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
