//! Reproducible experiment runner for massive Gaussian free field level-set
//! percolation: curve estimation, threshold reports, the exact verification
//! suite, and field dumps.
//!
//! Exit codes: 0 on success, 1 when verification fails, 2 on configuration
//! errors.

mod commands;
mod config;
mod output;

use anyhow::Result;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gffls",
    version,
    about = "Massive Gaussian free field level-set percolation experiments"
)]
struct Cli {
    /// Experiment configuration (TOML). A small built-in default is used when
    /// omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (results are independent of this).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crossing-probability curves p(h) over the configured (theta, L) grid.
    Pcurve,
    /// Torus annulus-event curves q(h).
    Qcurve,
    /// Locate h**, fit sharpness below it and stretched-exponential decay
    /// above it.
    Threshold,
    /// Run the exact verification suite; exit 1 if any check fails.
    Verify,
    /// Write one field sample as a binary dump with JSON sidecar.
    DumpField,
}

const DEFAULT_CONFIG: &str = r#"
dim = 2
theta = [0.5]
scales = [2, 3, 4]
replicas = 400
levels = { start = -1.0, stop = 1.2, step = 0.2 }
"#;

fn load_config(cli: &Cli) -> Result<(config::ExperimentConfig, String)> {
    match &cli.config {
        Some(path) => config::load(path),
        None => {
            let cfg: config::ExperimentConfig = toml::from_str(DEFAULT_CONFIG)?;
            cfg.validate()?;
            let hash = format!("{:x}", Sha256::digest(DEFAULT_CONFIG.as_bytes()));
            Ok((cfg, hash))
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let (config, hash) = load_config(cli)?;
    let seed = cli.seed.unwrap_or(config.seed);
    let writer = output::Writer::new(&cli.out, &hash, seed)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(workers) = cli.workers {
        pool = pool.num_threads(workers);
    }
    let pool = pool.build()?;
    pool.install(|| -> Result<i32> {
        match cli.command {
            Command::Pcurve => commands::pcurve(&config, seed, &writer).map(|_| 0),
            Command::Qcurve => commands::qcurve(&config, seed, &writer).map(|_| 0),
            Command::Threshold => commands::threshold(&config, seed, &writer).map(|_| 0),
            Command::Verify => commands::verify(seed, &writer).map(|ok| if ok { 0 } else { 1 }),
            Command::DumpField => commands::dump_field(&config, seed, &writer).map(|_| 0),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
