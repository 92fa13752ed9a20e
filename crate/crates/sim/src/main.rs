use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use iome_core::mobility::{build_od_matrix, OdWindow};
use iome_sim::attacks::{run_all, AttackSuite};
use iome_sim::config::ScenarioConfig;
use iome_sim::metrics::od_csv;
use iome_sim::output::{load_run, write_run};
use iome_sim::sim::run;

#[derive(Parser)]
#[command(name = "iome", version, about = "Energy market and trip extraction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write chains, metrics and logs to a directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-verify the chains in a run directory.
    Audit { dir: PathBuf },
    /// Recount the O-D matrix for a window from a run's public chain.
    Od {
        dir: PathBuf,
        /// Half-open tick window, written FROM:TO.
        #[arg(long)]
        window: String,
    },
    /// Inject adversarial claims and price signals and report verdicts.
    Attack {
        config: PathBuf,
        /// Suite name, or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 200)]
        count: u32,
    },
    /// Parse and validate a scenario file.
    ValidateConfig { config: PathBuf },
}

/// Failures that map to exit status 2 rather than 1.
#[derive(Debug, thiserror::Error)]
#[error(transparent)]
struct UsageError(anyhow::Error);

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).map_err(|e| UsageError(e.into()).into())
}

fn parse_window(s: &str) -> Result<OdWindow> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| UsageError(anyhow!("window must be FROM:TO, got {s:?}")))?;
    let parse = |x: &str| x.trim().parse::<u64>().map_err(|e| UsageError(anyhow!("bad tick {x:?}: {e}")));
    OdWindow::new(parse(a)?, parse(b)?).map_err(|e| UsageError(anyhow!("{e}")).into())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let result = run(&cfg)?;
            let report = write_run(&out, &result)?;
            print!("{}", result.metrics.summary());
            print!("{}", report.render());
            Ok(report.is_clean())
        }
        Command::Audit { dir } => {
            let loaded = load_run(&dir)?;
            let report = loaded.audit();
            print!("{}", report.render());
            Ok(report.is_clean())
        }
        Command::Od { dir, window } => {
            let window = parse_window(&window)?;
            let loaded = load_run(&dir)?;
            print!("{}", od_csv(&[build_od_matrix(&loaded.public, window)]));
            Ok(true)
        }
        Command::Attack { config, suite, count } => {
            let cfg = load_config(&config)?;
            let reports = if suite == "all" {
                run_all(&cfg, count)?
            } else {
                let s: AttackSuite = suite.parse().map_err(|e| UsageError(anyhow!("{e}")))?;
                vec![iome_sim::attacks::run_suite(&cfg, s, count)?]
            };
            let mut ok = true;
            for r in &reports {
                println!("{}", r.line());
                ok &= r.all_correct();
            }
            Ok(ok)
        }
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config)?;
            println!(
                "ok: {} ticks, {} regions, {} stations, {} EVs",
                cfg.ticks,
                cfg.regions.len(),
                cfg.stations.len(),
                cfg.total_evs()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
