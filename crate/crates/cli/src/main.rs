//! `lorentz`: run the Lorentz gas verification lab from a TOML config.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 numerical or module
//! failure, 4 a check missed its threshold.

mod commands;
mod config;
mod report;

use clap::{Parser, Subcommand};
use config::RunConfig;
use report::{sha256_hex, Emission, Run};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config invalid: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "lorentz", version, about = "Z²-periodic Lorentz gas simulator and limit-law lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 for all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; artifacts go to DIR/<subcommand>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the table and certify a finite horizon.
    Validate,
    /// Estimate Σ², Φ(0), σ̃² and σ̂².
    Estimate,
    /// Exponential, Laplace, joint and flatness tests on both clocks.
    LimitTest,
    /// Exact checks on the lattice Markov-chain oracle.
    Oracle,
    /// Exact moment identities of the limit law.
    Moments {
        /// Largest moment order.
        #[arg(long)]
        max_m: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Estimate => "estimate",
            Command::LimitTest => "limit-test",
            Command::Oracle => "oracle",
            Command::Moments { .. } => "moments",
        }
    }
}

fn load(cli: &Cli) -> Result<(RunConfig, String), CliError> {
    let (mut cfg, hash, base) = match &cli.config {
        Some(p) => {
            let (cfg, bytes) = RunConfig::load(p)?;
            let base = p.parent().map(PathBuf::from).unwrap_or_default();
            (cfg, Some(sha256_hex(&bytes)), base)
        }
        None => (RunConfig::default(), None, PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Command::Moments { max_m: Some(m) } = cli.command {
        cfg.moments.max_m = m;
    }
    cfg.resolve(&base)?;
    // Without a file the hash covers the resolved defaults.
    let hash = hash.unwrap_or_else(|| sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes")));
    Ok((cfg, hash))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = SystemTime::now();
    let clock = Instant::now();
    let (cfg, hash) = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
        eprintln!("warning: thread pool: {e}");
    }
    let name = cli.command.name();
    let mut run = Run::new(name);
    match cli.command {
        Command::Validate => commands::validate(&cfg, &mut run),
        Command::Estimate => commands::estimate(&cfg, &mut run),
        Command::LimitTest => commands::limit_test(&cfg, &mut run),
        Command::Oracle => commands::oracle(&cfg, &mut run),
        Command::Moments { .. } => commands::moments(&cfg, &mut run),
    }
    let done = run.finish(hash, cfg.seed);
    let emission = Emission {
        dir: cfg.out.join(name),
        config: &cfg,
        config_source: cli.config.as_deref(),
        started,
        clock,
    };
    match emission.write(&done) {
        Ok(files) => {
            for s in &done.report.sections {
                let failed = s.checks.iter().filter(|c| !c.pass).count();
                match &s.error {
                    Some(e) => eprintln!("{:<16} failed  {}: {}", s.name, e.code, e.message),
                    None if failed > 0 => eprintln!("{:<16} {failed} of {} checks failed", s.name, s.checks.len()),
                    None => eprintln!("{:<16} ok ({} checks)", s.name, s.checks.len()),
                }
            }
            eprintln!("wrote {} files to {}", files.len(), emission.dir.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    ExitCode::from(done.exit_code() as u8)
}
