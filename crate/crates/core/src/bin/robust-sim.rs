use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robust::harness::{run_scenario, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "robust-sim", version, about = "Run crash-robust key-value store scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print one JSON report per period plus a summary.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the reports here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Collect lemma statistics for every period with lookups.
        #[arg(long)]
        check_lemmas: bool,
        /// Stop with status 3 once a period needs more rounds.
        #[arg(long)]
        max_rounds: Option<usize>,
    },
}

fn main() -> ExitCode {
    let Command::Run {
        scenario,
        seed,
        out,
        check_lemmas,
        max_rounds,
    } = Cli::parse().command;

    let result = Scenario::load(&scenario).and_then(|s| {
        run_scenario(
            &s,
            &RunOptions {
                seed,
                check_lemmas,
                max_rounds,
            },
        )
    });
    let output = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let text = output.to_json_lines();
    let written = match &out {
        Some(path) => std::fs::write(path, text),
        None => std::io::stdout().write_all(text.as_bytes()),
    };
    if let Err(e) = written {
        eprintln!("error: cannot write reports: {e}");
        return ExitCode::from(1);
    }
    if let Some(v) = &output.summary.first_violation {
        eprintln!("violation of {}: {}", v.invariant, v.detail);
    }
    ExitCode::from(output.summary.exit_code() as u8)
}
