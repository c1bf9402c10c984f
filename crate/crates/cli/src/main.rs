use std::path::PathBuf;

use clap::Parser;
use postrate_cli::run::{run, Command, Overrides};

/// Verification runs for finite-atom posterior convergence rates.
#[derive(Debug, Parser)]
#[command(name = "postrate", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated verification names; replaces the configured list.
    #[arg(long, value_delimiter = ',')]
    verify: Option<Vec<String>>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            std::process::exit(3);
        }
        Err(e) => e.exit(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
        verify: cli.verify,
    };
    std::process::exit(run(cli.command, cli.config.as_deref(), &overrides));
}
