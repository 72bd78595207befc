use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;

use commands::{CliError, Context};

/// Environment variable naming the default data directory.
pub const DATA_DIR_VAR: &str = "FEDSPLIT_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "fedsplit", version, about = "One-shot federated collaborative filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, filter and split the dataset; write snapshots and group lists.
    Prepare(Common),
    /// Train the baseline, the local models and the federated models.
    Run(Common),
    /// Run the reconstruction attacks against the published item factors.
    Audit(Common),
    /// Rebuild the summary tables from the per-seed reports.
    Report(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed list, e.g. `0,1,2` or `0..10`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Ratings file, or `synthetic:USERSxITEMS[:SEED]`. Relative paths are
    /// looked up in $FEDSPLIT_DATA_DIR when they do not exist as given.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    type Handler = fn(&Context) -> Result<(), CliError>;
    let (common, run): (&Common, Handler) = match &cli.command {
        Command::Prepare(c) => (c, commands::prepare),
        Command::Run(c) => (c, commands::run),
        Command::Audit(c) => (c, commands::audit),
        Command::Report(c) => (c, commands::report),
    };
    let result = Context::resolve(common).and_then(|ctx| {
        if common.dry_run {
            return ctx.print_dry_run();
        }
        if let Some(jobs) = common.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build_global()
                .map_err(|e| CliError::input(anyhow::anyhow!("cannot size the worker pool: {e}")))?;
        }
        run(&ctx)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
