use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use asymrd_cli::{commands, CliError, Config};
use clap::{Args, Parser, Subcommand};

static DEFAULTS: LazyLock<String> =
    LazyLock::new(|| format!("Configuration defaults (TOML; every key optional):\n\n{}", Config::default().to_toml()));

/// Confusion-matrix asymmetry and rate-distortion analysis.
#[derive(Parser)]
#[command(version, after_long_help = DEFAULTS.as_str())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; see `--help` for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `[sim.grid] seed_root`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze every block of a long-form confusion table.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Long-form confusion table; overrides `[input] path`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the simulation grid.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Rerun from the config snapshot in an earlier manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Statistics and plot-ready tables from simulation results or block records.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results table written by `simulate` or `analyze`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// MAP fit of a single block.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = |c: &Common| commands::load_config(c.config.as_deref(), c.seed);
    match cli.command {
        Command::Analyze { common, input } => commands::run_analyze(&cfg(&common)?, input.as_deref(), &common.out),
        Command::Simulate { common, manifest } => {
            let n = commands::run_simulate(&cfg(&common)?, manifest.as_deref(), &common.out)?;
            eprintln!("wrote {n} replicates to {}", common.out.display());
            Ok(())
        }
        Command::Report { common, input } => {
            let files = commands::run_report(&cfg(&common)?, input.as_deref(), &common.out)?;
            eprintln!("wrote {} tables to {}", files.len(), common.out.display());
            Ok(())
        }
        Command::Fit { common, input } => commands::run_fit(&cfg(&common)?, input.as_deref(), &common.out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
