use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapek_mas::sim::{replay_text, run_simulation, ConfigError, Execution, SimConfig, Simulation};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_AUTH: u8 = 3;

#[derive(Parser)]
#[command(name = "mapek-sim", version, about = "Run and replay LLM-agent marketplace simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write its transcript, report and histories.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plan agent cycles one at a time instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
        /// Print the plain-text report instead of a one-line summary.
        #[arg(long)]
        report: bool,
    },
    /// Re-derive a run from its transcript and check the recorded report.
    Replay { transcript: PathBuf },
    /// Check a config file and print the fully resolved configuration.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<SimConfig, ExitCode> {
    SimConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        if let ConfigError::Validation(_) = e {
            eprintln!("{} is not a usable config", path.display());
        }
        ExitCode::from(EXIT_CONFIG)
    })
}

fn run(config: PathBuf, out: Option<PathBuf>, sequential: bool, show_report: bool) -> ExitCode {
    let mut config = match load(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(out) = out {
        config.output_dir = out;
    }
    let result = if sequential {
        Simulation::from_config(config.clone()).and_then(|sim| {
            let artifacts = sim.execution(Execution::Sequential).run();
            let paths = artifacts.write_to(&config.output_dir)?;
            Ok(mapek_mas::sim::RunOutcome { artifacts, paths })
        })
    } else {
        run_simulation(&config)
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let report = &outcome.artifacts.report;
    if show_report {
        print!("{}", report.to_text());
    } else {
        let winner = |w: &Option<mapek_mas::marketplace::Winner>| {
            w.as_ref().map_or("none".to_string(), |w| format!("{} ({})", w.agent, w.amount))
        };
        println!(
            "{}: {} iterations, {} sale(s), {} anomal{}; seller winner {}, buyer winner {}",
            report.run_id,
            report.rounds,
            report.settlements.len(),
            report.anomalies.len(),
            if report.anomalies.len() == 1 { "y" } else { "ies" },
            winner(&report.seller_winner),
            winner(&report.buyer_winner),
        );
    }
    println!("transcript: {}", outcome.paths.transcript.display());
    println!("report:     {}", outcome.paths.report_json.display());
    let code = outcome.exit_code();
    if code == i32::from(EXIT_AUTH) {
        eprintln!(
            "error: {} model call(s) were rejected for bad credentials",
            outcome.artifacts.auth_failures()
        );
    }
    ExitCode::from(code as u8)
}

fn replay(path: PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    match replay_text(&text) {
        Ok(summary) => {
            println!(
                "replay ok: {} ({} records, {} cycles, {} sale(s), {} anomalies)",
                summary.run_id,
                summary.records,
                summary.cycles,
                summary.report.settlements.len(),
                summary.report.anomalies.len()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("replay failed: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn validate(path: PathBuf) -> ExitCode {
    match load(&path) {
        Ok(config) => {
            println!("{}", config.to_json_pretty());
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, out, sequential, report } => run(config, out, sequential, report),
        Command::Replay { transcript } => replay(transcript),
        Command::Validate { config } => validate(config),
    }
}
