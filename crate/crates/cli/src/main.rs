use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Parser, Subcommand};
use deepo_cli::config::{parse_seeds, Experiment, FileConfig, Settings};
use deepo_cli::experiments::run_experiment;
use deepo_cli::output::{write_diagnostics, write_metadata, write_summary, RunDir};
use deepo_cli::CliError;

#[derive(Parser)]
#[command(name = "deepo", version, about = "DeePO experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed, comma list or half-open range `a..b`.
    #[arg(long, global = true, value_parser = seed_list)]
    seed: Option<SeedList>,
    /// Output directory (default `runs/<experiment>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn seed_list(text: &str) -> Result<SeedList, String> {
    parse_seeds(text).map(SeedList)
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Offline projected gradient descent on a fixed batch.
    Offline,
    /// Online DeePO regret across noise levels.
    Adaptive,
    /// Online DeePO against the indirect certainty-equivalence learner.
    CompareIndirect,
    /// Finite-horizon cost of DeePO and the indirect learner.
    FiniteCost,
    /// Per-step computation time of both learners.
    Timing,
    /// Sample counts of zeroth-order PO and DeePO per gap target.
    ZoComplexity,
    /// List experiments and the claims they check.
    List,
}

impl Command {
    fn experiment(self) -> Option<Experiment> {
        Some(match self {
            Command::Offline => Experiment::OfflineConvergence,
            Command::Adaptive => Experiment::AdaptiveRegret,
            Command::CompareIndirect => Experiment::CompareIndirect,
            Command::FiniteCost => Experiment::FiniteHorizonCost,
            Command::Timing => Experiment::Timing,
            Command::ZoComplexity => Experiment::ZoSampleComplexity,
            Command::List => return None,
        })
    }
}

fn list() {
    for e in Experiment::ALL {
        println!("{:<16} {:<22} {}", e.subcommand(), e.name(), e.claim());
    }
}

fn execute(cli: Cli, experiment: Experiment) -> Result<bool, CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let settings = Settings::resolve(experiment, file, cli.seed.map(|s| s.0), cli.out)?;
    let dir = RunDir::create(&settings.output_dir)?;
    let started = SystemTime::now();
    let report = match run_experiment(&settings, &dir) {
        Ok(r) => r,
        Err(err) => {
            write_diagnostics(&dir, &settings, &err)?;
            eprintln!(
                "diagnostics written to {}",
                dir.path("diagnostics.json").display()
            );
            return Err(err);
        }
    };
    write_summary(&dir, &settings, &report)?;
    write_metadata(&dir, started, SystemTime::now())?;
    for c in &report.checks {
        println!("{}", c.line());
    }
    println!("outputs in {}", settings.output_dir.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(experiment) = cli.command.experiment() else {
        list();
        return ExitCode::SUCCESS;
    };
    match execute(cli, experiment) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
