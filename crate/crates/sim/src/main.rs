use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sara_sim::gen::{generate, GenOptions, ModelKind};
use sara_sim::scenario::TransportKind;
use sara_sim::{run, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "sara-sim", about = "Replay voxel-game scenarios against a live server and an oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and check it against the oracle.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Force one transport on every client.
        #[arg(long)]
        transport: Option<TransportKind>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Drive the server clock from the timeline instead of the wall clock.
        #[arg(long)]
        virtual_time: bool,
    },
    /// Print a random scenario as JSON.
    Gen {
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        ops: usize,
        #[arg(long, default_value = "unconstrained")]
        model: ModelKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(tracing::Level::WARN).init();
    match Cli::parse().command {
        Command::Gen { clients, ops, model, seed } => {
            println!("{}", generate(&GenOptions { clients, ops, model, seed }).to_json());
            ExitCode::SUCCESS
        }
        Command::Run { scenario, seed, transport, report, virtual_time } => {
            let sc = match Scenario::load(&scenario) {
                Ok(sc) => sc,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let opts = RunOptions { seed, transport, virtual_time, ..RunOptions::default() };
            let r = match run(&sc, &opts).await {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("run failed: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(path) = report {
                if let Err(e) = std::fs::write(&path, r.to_json()) {
                    eprintln!("cannot write {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            println!("{}", r.summary());
            for f in r.failures() {
                println!("  {f}");
            }
            if r.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
