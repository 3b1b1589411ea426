use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use costpose::harness::cli::{self, CliError};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "costpose",
    version,
    about = "Matching-free image-to-point-cloud registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes (cloud, metadata, oracle features).
    Synth(Common),
    /// Register one scene and write the result JSON.
    Register(Common),
    /// Run a benchmark suite and write report.json and scenes.jsonl.
    Bench(Common),
    /// Train the convolutional scorer.
    TrainScorer(Common),
    /// Check every analytic gradient against finite differences.
    GradCheck(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => cli::synth(&cli::read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::Register(c) => cli::register_command(&cli::read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::Bench(c) => cli::bench(&cli::read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::TrainScorer(c) => cli::train_command(&cli::read_config(c.config.as_deref())?, c.seed, &c.out),
        Command::GradCheck(c) => cli::grad_check_command(&cli::read_config(c.config.as_deref())?, c.seed, &c.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.error());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
