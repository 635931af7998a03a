use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mmq::cli::{exit_code_for, run_file, Command, Overrides};

/// Simulate Markov-modulated infinite-server networks and check their scaling limits.
#[derive(Debug, Parser)]
#[command(name = "mmq", version)]
struct Args {
    /// One of: validate, chain-summary, fluid, ou-moments, simulate,
    /// verify-fluid, verify-occupation, verify-diffusion, verify-equivalence,
    /// verify-model3, reduce-model3.
    command: Command,
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (replaces output.directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (replaces run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replications (replaces run.reps).
    #[arg(long)]
    reps: Option<usize>,
    /// Scale index (replaces scaling.n).
    #[arg(long)]
    n: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        reps: args.reps,
        n: args.n,
    };
    match run_file(args.command, &args.config, &overrides) {
        Ok(outcome) => {
            print!("{}", outcome.message);
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
