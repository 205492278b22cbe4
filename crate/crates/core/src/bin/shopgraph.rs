use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shopgraph::harness::{self, HarnessError, Overrides};

#[derive(Parser)]
#[command(version, about = "Train and evaluate graph-based scheduling agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Episode count; overrides `schedule.episodes` for training and sets
    /// the number of rollouts for eval and baseline.
    #[arg(long)]
    episodes: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            episodes: self.episodes,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per resource; writes curves.csv, checkpoints/ and run-manifest.toml.
    Train(Common),
    /// Roll out trained checkpoints; writes report.csv and summary.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to <out>/checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Sample actions instead of taking the most likely one.
        #[arg(long)]
        sample: bool,
    },
    /// Run a dispatching rule (FIFO, SPT, RANDOM); writes report.csv and summary.csv.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rule: String,
    },
    /// Finite-difference gradient checks of the dense networks and the encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per suite.
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train(c) => {
            let out = harness::cmd_train(&c.config, &c.overrides())?;
            println!(
                "{} episodes -> {}",
                out.report.episodes,
                out.config.out_dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoints,
            sample,
        } => {
            let o = Overrides {
                episodes: None,
                ..common.overrides()
            };
            let dir = match checkpoints {
                Some(d) => d,
                None => harness::load_with_overrides(&common.config, &o)?.out_dir.join("checkpoints"),
            };
            let runs = harness::cmd_eval(&dir, &common.config, common.episodes.unwrap_or(20), sample, &o)?;
            print_summary(&runs);
        }
        Command::Baseline { common, rule } => {
            let o = Overrides {
                episodes: None,
                ..common.overrides()
            };
            let runs = harness::cmd_baseline(&common.config, &rule, common.episodes.unwrap_or(20), &o)?;
            print_summary(&runs);
        }
        Command::Gradcheck {
            seed,
            episodes,
            tolerance,
        } => {
            let s = harness::cmd_gradcheck(seed, episodes, tolerance)?;
            println!("dense networks: max relative error {:.3e}", s.dense_max_rel_error);
            println!("encoder:        max relative error {:.3e}", s.encoder_max_rel_error);
            println!("{} configurations each, tolerance {tolerance:e}: {}", s.configurations, if s.passed { "pass" } else { "FAIL" });
            return Ok(s.passed);
        }
    }
    Ok(true)
}

fn print_summary(runs: &[shopgraph::dispatch::RunSummary]) {
    for r in shopgraph::dispatch::compare(runs) {
        println!(
            "{:<16} runs {:>4}  success {:.2}  makespan mean {}  min {}  max {}",
            r.policy,
            r.runs,
            r.success_rate(),
            r.mean_makespan.map_or("-".into(), |m| format!("{m:.1}")),
            r.min_makespan.map_or("-".into(), |m| m.to_string()),
            r.max_makespan.map_or("-".into(), |m| m.to_string()),
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
