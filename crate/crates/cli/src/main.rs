use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ehmac_cli::{
    cmd_analyze, cmd_compare, cmd_simulate, cmd_tradeoff, read_rows, worker_pool, write_rows, CliError,
    Manifest, Row, SweepSpec,
};

#[derive(Parser)]
#[command(name = "ehmac", version, about = "MAC analysis and simulation for energy-harvesting sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration or sweep file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output CSV; stdout when omitted. A manifest is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical metrics for every grid point.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Simulated metrics for every grid point and backlog mode.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<u32>,
        /// Measured rounds per replica, after warm-up.
        #[arg(long)]
        irs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Per-round trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Gaps between a reference CSV (usually analysis) and another CSV.
    Compare {
        reference: PathBuf,
        other: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delivery/time-efficiency envelope over the rho axis.
    Tradeoff {
        #[command(flatten)]
        common: Common,
    },
}

fn emit(command: &str, spec: &SweepSpec, rows: &[Row], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            write_rows(BufWriter::new(File::create(path)?), rows)?;
            Manifest::new(command, spec, rows.len(), path).write(path)?;
        }
        None => write_rows(io::stdout().lock(), rows)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let pool = worker_pool()?;
    match cli.command {
        Command::Analyze { common } => {
            let spec = SweepSpec::load(&common.config)?;
            let rows = pool.install(|| cmd_analyze(&spec))?;
            emit("analyze", &spec, &rows, common.out.as_deref())?;
        }
        Command::Simulate { common, seed, replicas, irs, warmup, trace } => {
            let mut spec = SweepSpec::load(&common.config)?;
            spec.seed = seed.unwrap_or(spec.seed);
            spec.replicas = replicas.unwrap_or(spec.replicas);
            spec.irs = irs.unwrap_or(spec.irs);
            spec.warmup = warmup.unwrap_or(spec.warmup);
            let rows = match trace {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(path)?);
                    let rows = pool.install(|| cmd_simulate(&spec, Some(&mut w)))?;
                    w.flush()?;
                    rows
                }
                None => pool.install(|| cmd_simulate(&spec, None))?,
            };
            emit("simulate", &spec, &rows, common.out.as_deref())?;
        }
        Command::Compare { reference, other, out } => {
            let a = read_rows(File::open(reference)?)?;
            let b = read_rows(File::open(other)?)?;
            let report = cmd_compare(&a, &b)?;
            println!("{report}");
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            return Ok(report.pass);
        }
        Command::Tradeoff { common } => {
            let spec = SweepSpec::load(&common.config)?;
            let rows = pool.install(|| cmd_tradeoff(&spec))?;
            emit("tradeoff", &spec, &rows, common.out.as_deref())?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
