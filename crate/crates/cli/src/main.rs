use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deferral_core::harness::{self, CliError, Overrides, PolicyName, RunConfig};

#[derive(Parser)]
#[command(name = "deferral", version, about = "Uncertainty-gated deferral between a small and a large decision model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; overrides `run.parallelism`.
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,
    /// Base seed of test episodes; overrides `environment.seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run small-only calibration episodes and fit one threshold per measure.
    Calibrate(Common),
    /// Run test episodes under one policy, or every configured policy.
    Run {
        #[command(flatten)]
        common: Common,
        /// never, always, random, threshold or threshold-<sp|ppl|mte>.
        #[arg(long, value_name = "NAME")]
        policy: Option<String>,
        /// Measure for `--policy threshold`.
        #[arg(long, value_name = "NAME")]
        measure: Option<String>,
    },
    /// Summarize episode logs: success, calls, tokens, cost, histograms.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true, value_name = "LOG")]
        logs: Vec<PathBuf>,
    },
    /// Label every small-model step of a log with the planner oracle.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(value_name = "LOG")]
        log: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        out: common.out.clone(),
        parallelism: common.parallelism,
        seed: common.seed,
    };
    harness::load_config(&common.config, &overrides)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Calibrate(common) => {
            let config = load(&common)?;
            for r in harness::cmd_calibrate(&config)? {
                let flags = match (r.k_unreachable, r.p_random_clamped) {
                    (true, _) => " (K exceeds mean episode length)",
                    (false, true) => " (p clamped)",
                    _ => "",
                };
                println!(
                    "{}: tau {} achieved {:.3} calls/episode (K {}), p_random {:.4}{flags}",
                    r.measure, r.tau, r.achieved_mean_calls, r.k_target, r.p_random
                );
            }
            Ok(())
        }
        Command::Run {
            common,
            policy,
            measure,
        } => {
            let config = load(&common)?;
            let names = match policy {
                Some(p) => vec![PolicyName::resolve(&p, measure.as_deref()).map_err(CliError::usage)?],
                None if measure.is_some() => return Err(CliError::usage("--measure needs --policy threshold")),
                None => config.run.policies.clone(),
            };
            for name in names {
                println!("{}", harness::cmd_run(&config, name)?);
            }
            Ok(())
        }
        Command::Report { common, logs } => {
            let config = load(&common)?;
            for r in harness::cmd_report(&config, &logs)? {
                println!(
                    "{}: success {:.3} ± {:.3}, large calls {:.2} ± {:.2}, cost ${:.2} ({} episodes, {} excluded)",
                    r.policy,
                    r.success.rate,
                    r.success.bootstrap_std,
                    r.mean_large_calls,
                    r.std_large_calls,
                    r.cost.total,
                    r.episodes,
                    r.excluded_failures
                );
            }
            println!("reports written to {}", config.output_dir.join("reports").display());
            Ok(())
        }
        Command::Label { common, log } => {
            let config = load(&common)?;
            let s = harness::cmd_label(&config, &log)?;
            println!("{} steps ({} correct, {} incorrect)", s.steps, s.correct, s.incorrect);
            for score in &s.scores {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:?} {}: PRR {} ROC-AUC {}",
                    score.stage,
                    score.measure,
                    fmt(score.prr),
                    fmt(score.roc_auc)
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { harness::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
