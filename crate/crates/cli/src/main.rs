//! `etrm`: maximum-energy control of a point-absorber wave energy converter.
//!
//! Exit status: 0 on success, 1 for configuration/usage/I-O errors, 2 when
//! the solver fails to converge.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use etrm_core::config::{OutputFormat, RunConfig};
use etrm_core::runner::{execute, sweep_epsilon, write_artifacts};

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "etrm",
    version,
    about = "Epsilon-trig regularized optimal control of a wave energy converter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a case and write the trajectory CSV and summary JSON.
    Run {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        output: Output,
        /// Artifact formats (overrides the configuration).
        #[arg(long, value_delimiter = ',')]
        format: Option<Vec<Format>>,
    },
    /// Check a configuration without solving.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// Record the harvested energy at a decreasing list of epsilons.
    SweepEpsilon {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        output: Output,
        /// Strictly decreasing epsilon values, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
        /// Number of sweep points solved concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in case: case1, case2 or case3.
    #[arg(long)]
    case: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Output {
    /// Output directory (default: the configuration's, else the current directory).
    #[arg(long, env = "ETRM_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Solver(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.into())
    }
}

fn load(source: &Source) -> Result<RunConfig, Failure> {
    match (&source.case, &source.config) {
        (Some(case), None) => Ok(RunConfig::builtin(case)),
        (None, Some(path)) => RunConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Config),
        _ => unreachable!("clap enforces exactly one source"),
    }
}

fn out_dir(output: &Output, config: &RunConfig) -> PathBuf {
    output
        .out_dir
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(source: &Source, output: &Output, format: Option<&[Format]>) -> Result<(), Failure> {
    let mut config = load(source)?;
    if let Some(formats) = format {
        config.output.formats = formats.iter().map(|&f| f.into()).collect();
    }
    let artifacts = execute(&config)?;
    let dir = out_dir(output, &config);
    let written = write_artifacts(&artifacts, &dir, &config.output.formats)?;
    let s = &artifacts.summary;
    for path in &written {
        eprintln!("wrote {}", path.display());
    }
    match (s.energy_mj, &s.arcs) {
        (Some(e), Some(arcs)) if s.converged() => {
            println!(
                "{}: converged, E = {e:.6} MJ, arcs {arcs}, eps {:e}, {} nodes, {:.2} s",
                s.case_id,
                s.final_epsilon.unwrap_or(f64::NAN),
                s.mesh_points.unwrap_or(0),
                s.wall_clock_s
            );
            Ok(())
        }
        _ => Err(Failure::Solver(format!(
            "{}: {}",
            s.case_id,
            s.error.as_deref().unwrap_or("solver failed")
        ))),
    }
}

fn validate(source: &Source) -> Result<(), Failure> {
    let config = load(source)?;
    let case = config.resolve()?;
    println!(
        "valid: case {} (gamma {:e} N, tf {} s, {} excitation terms, {} + {} continuation steps)",
        case.id,
        case.model.gamma,
        case.boundary.tf,
        case.excitation.terms.len(),
        config.schedule.tf_steps,
        config.schedule.eps_steps
    );
    Ok(())
}

fn sweep(source: &Source, output: &Output, epsilons: &[f64], jobs: usize) -> Result<(), Failure> {
    let config = load(source)?;
    let table = sweep_epsilon(&config, epsilons, jobs)?;
    let dir = out_dir(output, &config);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{}_sweep.csv", table.case_id));
    write(&path, &table.to_csv())?;
    eprintln!("wrote {}", path.display());
    for row in &table.rows {
        println!("{:e}\t{:.6} MJ", row.epsilon, row.energy_j / 1e6);
    }
    match table.error {
        None => Ok(()),
        Some(e) => Err(Failure::Solver(format!("{}: {e}", table.case_id))),
    }
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Run {
            source,
            output,
            format,
        } => run(source, output, format.as_deref()),
        Command::Validate { source } => validate(source),
        Command::SweepEpsilon {
            source,
            output,
            epsilons,
            jobs,
        } => sweep(source, output, epsilons, *jobs as usize),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}
