//! Command-line front end for the phase-routed mixture-of-experts workbench.
//!
//! Exit codes: 0 on success, 2 for config/usage errors, 3 for numerical
//! aborts or self-check failures, 1 for I/O failures.

use clap::{Parser, Subcommand};
use phase_moe::harness::{
    cli_ablate, cli_compare_routing, cli_report, cli_train, code_version, selfcheck, AblationAxis, ArmOutcome,
    ExperimentConfig, HarnessError,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "phase-moe", version, about = "Train and analyze phase-routed mixture-of-experts agents")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed and write per-seed artifacts plus a
    /// cross-seed aggregate.
    Train {
        /// TOML experiment config; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Dotted-path config overrides, e.g. --set policy.n_experts=2
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the phase/token/trajectory routing arms on shared seeds.
    CompareRouting {
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sweep one ablation axis: K, regularizers, router_components, surgery.
    Ablate {
        #[arg(long)]
        axis: String,
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Aggregate completed run directories into summary tables and CSVs.
    Report {
        /// Run directories (each containing manifest.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for the report CSVs.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Run the fast invariant battery (gradients, schedules, estimators).
    Selfcheck,
}

fn load(config: Option<PathBuf>, set: &[String]) -> Result<ExperimentConfig, HarnessError> {
    match config {
        Some(path) => ExperimentConfig::from_file(&path, set),
        None => ExperimentConfig::from_overrides(set),
    }
}

fn print_arms(dir: &std::path::Path, outcomes: &[ArmOutcome]) {
    println!("wrote {}", dir.display());
    for o in outcomes {
        let n = o.run.summaries.len() as f64;
        let mean = o.run.summaries.iter().map(|s| s.overall_success).sum::<f64>() / n;
        let switches = o.run.summaries.iter().map(|s| s.mean_step_switches).sum::<f64>() / n;
        println!("  {:<18} success {:.3}  switches/ep {:.2}  ({} seeds)", o.arm, mean, switches, n as usize);
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Train { config, set } => {
            let cfg = load(config, &set)?;
            let out = cli_train(&cfg)?;
            println!("wrote {}", out.run_dir.display());
            for s in &out.summaries {
                println!(
                    "  seed {:<3} success {:.3}  return {:+.3}  switches/ep {:.2}  alignment {:.3}",
                    s.seed, s.overall_success, s.mean_return, s.mean_step_switches, s.phase_alignment
                );
            }
        }
        Cmd::CompareRouting { config, set } => {
            let cfg = load(config, &set)?;
            let (dir, outcomes) = cli_compare_routing(&cfg)?;
            print_arms(&dir, &outcomes);
        }
        Cmd::Ablate { axis, config, set } => {
            let cfg = load(config, &set)?;
            let axis = AblationAxis::parse(&axis)?;
            let (dir, outcomes) = cli_ablate(&cfg, axis)?;
            print_arms(&dir, &outcomes);
        }
        Cmd::Report { runs, out } => {
            let report = cli_report(&runs, &out)?;
            print!("{}", report.tables);
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", out.display());
        }
        Cmd::Selfcheck => {
            println!("code version {}", code_version());
            let results = selfcheck();
            let mut failed = 0;
            for c in &results {
                println!("{} {:<28} {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
                if !c.pass {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(HarnessError::Numerical(format!("{failed} self-checks failed")));
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
