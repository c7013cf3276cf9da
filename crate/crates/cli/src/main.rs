use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvmilstein::commands::{execute, resolve_output_dir, with_threads, Command};
use mvmilstein::config::RunConfig;
use mvmilstein::error::Error;

#[derive(Parser)]
#[command(name = "mvmilstein", version, about = "Taming Milstein schemes for McKean-Vlasov particle systems")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run one particle system and write snapshots
    Simulate(Flags),
    /// Strong-error study against coupled reference paths
    Converge(Flags),
    /// Check the taming operators and model derivatives
    Validate(Flags),
    /// Track the p-th moment across a step-size grid
    Moments(Flags),
    /// Report blow-up and clustering at the horizon
    Probe(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats MVMILSTEIN_OUTPUT_DIR and io.output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cmd: Command, flags: &Flags) -> Result<bool, Error> {
    let mut config = RunConfig::from_path(&flags.config)?;
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    let out = resolve_output_dir(flags.out.as_deref(), &config);
    let outcome = with_threads(flags.threads, || execute(cmd, &config, &out))??;
    let line = serde_json::json!({
        "command": cmd.name(),
        "passed": outcome.passed,
        "output_dir": out,
        "files": outcome.files,
    });
    println!("{line}");
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, flags) = match &cli.command {
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Converge(f) => (Command::Converge, f),
        Sub::Validate(f) => (Command::Validate, f),
        Sub::Moments(f) => (Command::Moments, f),
        Sub::Probe(f) => (Command::Probe, f),
    };
    match run(cmd, flags) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
