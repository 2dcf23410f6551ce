use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use coalflow::config::{validate_config, ConfigError, ExperimentConfig};
use coalflow::experiment::{
    check_matrices, generate_pairs, matrices_report, run_experiment, summary_text, support_csv,
    write_outputs,
};

/// Largest accepted `|B u_nom - v_nom|` for `check-matrices`.
const NOMINAL_CHECK_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "coalflow", version, about = "Dynamic coalitional game simulator")]
struct Cli {
    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the trajectory decimation stride.
    #[arg(long, global = true)]
    stride: Option<usize>,

    /// Worker threads for trials (default: one per processor).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print nothing on success.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment and write the trajectory CSV and summary.
    Run { config: PathBuf },
    /// Print B, its pseudo-inverse and the identity residuals.
    CheckMatrices { config: PathBuf },
    /// Generate one support/probability pair and print it as CSV.
    GenSupport {
        config: PathBuf,
        /// Which pair to generate (same stream as `run`).
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and cross-check a config without running anything.
    Validate { config: PathBuf },
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<coalflow::Error> for Failure {
    fn from(e: coalflow::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            Err(Failure::Runtime(anyhow::Error::new(e).context("cannot write to stdout")))
        }
        _ => Ok(()),
    }
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = validate_config(&text).map_err(Failure::Config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(stride) = cli.stride {
        if stride == 0 {
            return Err(Failure::Config(ConfigError {
                violations: vec![coalflow::config::Violation {
                    path: "--stride".into(),
                    message: "must be at least 1".into(),
                }],
            }));
        }
        cfg.stride = stride;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load(config, cli)?;
            cfg.system()?;
            if !cli.quiet {
                emit(&format!(
                    "{}: ok ({} players, {} coalitions, controller {})\n",
                    config.display(),
                    cfg.players,
                    cfg.coalitions(),
                    cfg.controller
                ))?;
            }
        }
        Command::CheckMatrices { config } => {
            let cfg = load(config, cli)?;
            let sys = cfg.system()?;
            let check = check_matrices(&sys);
            if !cli.quiet {
                emit(&matrices_report(&sys))?;
            }
            if check.nominal_residual > NOMINAL_CHECK_TOL {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "B u_nom differs from v_nom by {:e}",
                    check.nominal_residual
                )));
            }
            if !cli.quiet {
                emit("nominal_check = pass\n")?;
            }
        }
        Command::GenSupport {
            config,
            pair,
            output,
        } => {
            let mut cfg = load(config, cli)?;
            cfg.pairs = pair + 1;
            let support = generate_pairs(&cfg)?.pop().expect("at least one pair");
            let csv = support_csv(&support.process);
            match output {
                Some(path) => fs::write(path, csv)
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => emit(&csv)?,
            }
            if !cli.quiet {
                eprintln!("support found after {} attempts", support.attempts);
            }
        }
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let result = run_experiment(&cfg, cli.workers)?;
            write_outputs(&result).with_context(|| {
                format!("cannot write outputs to {}", cfg.out_dir.display())
            })?;
            if !cli.quiet {
                emit(&format!(
                    "{}\nwrote {} and {}\n",
                    summary_text(&result),
                    cfg.trajectory_path().display(),
                    cfg.summary_path().display()
                ))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprint!("{e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
