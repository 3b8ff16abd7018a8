//! `lensrig`: configuration-driven experiments on lens data and X-ray transforms.

mod commands;
mod config;
mod error;
mod fields;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Output;
use crate::config::Loaded;
use crate::error::CliError;
use crate::verify::Suite;

#[derive(Parser)]
#[command(name = "lensrig", version, about = "Lens data, X-ray transforms and trapped-set statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "LENSRIG_JOBS")]
    jobs: Option<usize>,
    /// Seed for Monte Carlo and noise; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Convexity and curvature report.
    Audit(Common),
    /// Lens data on the boundary grid.
    Lens(Common),
    /// Santalo formula for the constant integrand.
    Santalo(Common),
    /// Trapped-volume curve and escape-rate fit.
    Escape(Common),
    /// X-ray transform of the configured field.
    Xray(Common),
    /// Reconstruct a solenoidal tensor field from X-ray data.
    Invert(Common),
    /// Invariant suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (common, name) = match &cli.command {
        Command::Audit(c) => (c, "audit"),
        Command::Lens(c) => (c, "lens"),
        Command::Santalo(c) => (c, "santalo"),
        Command::Escape(c) => (c, "escape"),
        Command::Xray(c) => (c, "xray"),
        Command::Invert(c) => (c, "invert"),
        Command::Verify { common, .. } => (common, "verify"),
    };
    let loaded = Loaded::load(&common.config, common.seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let out = Output::create(loaded.out_dir(common.out.as_deref()), &loaded.hash, name)?;
    pool.install(|| match &cli.command {
        Command::Audit(_) => commands::audit(&loaded, &out),
        Command::Lens(_) => commands::lens(&loaded, &out),
        Command::Santalo(_) => commands::santalo(&loaded, &out),
        Command::Escape(_) => commands::escape(&loaded, &out),
        Command::Xray(_) => commands::xray(&loaded, &out),
        Command::Invert(_) => commands::invert(&loaded, &out),
        Command::Verify { suite, .. } => verify::verify(&loaded, *suite, &out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("lensrig: checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("lensrig: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
