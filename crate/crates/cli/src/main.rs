use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qgeom::checks;
use qgeom::complexity;
use qgeom::error::Error;
use qgeom::experiments::{Experiment, P};
use qgeom::geometry;
use qgeom::model::{self, Dataset, Theta};
use qgeom::rng;
use serde_json::{json, Value};

const EXIT_ASSERTION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "qgeom", version, about = "Quotient geometry experiments for quadratic-activation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hessian spectra across orbit representatives.
    FalseFlatness(RunArgs),
    /// Local descriptors and decay rates under logistic loss.
    LocalDynamics(RunArgs),
    /// Parameter-level and Q-level complexity of interpolating solutions.
    ImplicitBias(RunArgs),
    /// Run the invariant suite and print a pass/fail table.
    Check,
    /// Print the regularity and complexity reports of a parameter vector.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); fields not given take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create. Must not exist.
    #[arg(long)]
    out: PathBuf,
    /// Override a config field, e.g. `--set seed=7` or `--set tol_block.rank_tol=1e-9`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
struct InspectArgs {
    /// Parameter JSON: `{"m": .., "d": .., "units": [{"a": .., "w": [..]}, ..]}`.
    theta: PathBuf,
    /// Dataset JSON (`X`, `y`, `task`). Without it a Gaussian probe design is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the probe design.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn read_json(path: &Path, what: &str) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{what} {} is not valid JSON: {e}", path.display())))
}

fn run_experiment(exp: Experiment, args: &RunArgs) -> Result<u8, Failure> {
    let file = read_json(&args.config, "config file")?;
    let cfg = exp.config_from_json(Some(&file), &args.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    if args.out.exists() {
        return Err(Failure::Usage(format!("output directory {} already exists", args.out.display())));
    }
    let output = exp.run(&cfg)?;
    output.write_run_dir(&args.out)?;
    let summary = &output.summary;
    for a in &summary.assertions {
        println!("{:<5} {:<40} measured {:.6e}  tolerance {:.6e}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.measured, a.tolerance);
    }
    println!("wrote {}", args.out.display());
    Ok(if summary.all_passed() { 0 } else { EXIT_ASSERTION })
}

fn run_check() -> u8 {
    let results = checks::run_all();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{:<5} {:<width$}  {:>7.2}s  {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", results.len());
    if failed == 0 {
        0
    } else {
        EXIT_ASSERTION
    }
}

fn run_inspect(args: &InspectArgs) -> Result<u8, Failure> {
    let theta: Theta = serde_json::from_value(read_json(&args.theta, "parameter file")?)
        .map_err(|e| Failure::Usage(format!("invalid parameter file {}: {e}", args.theta.display())))?;
    let x = match &args.data {
        Some(path) => {
            let data: Dataset = serde_json::from_value(read_json(path, "data file")?)
                .map_err(|e| Failure::Usage(format!("invalid data file {}: {e}", path.display())))?;
            if data.d() != theta.d() {
                return Err(Failure::Usage(format!("data has d = {} but parameters have d = {}", data.d(), theta.d())));
            }
            data.x
        }
        None => {
            let n = theta.m() * (theta.d() + 1) + model::sym_dim(theta.d());
            let mut rng = rng::stream(args.seed, "inspect/probe");
            nalgebra::DMatrix::from_row_slice(n, theta.d(), &rng::normal_vec(&mut rng, n * theta.d()))
        }
    };
    let tol = qgeom::experiments::TolBlock::default();
    let regularity = geometry::regularity_check(&theta, &x, P, tol.rank_tol, tol.angle_tol)?;
    let complexity = complexity::complexity_report(&theta, P)?;
    let report = json!({ "regularity": regularity, "complexity": complexity });
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FalseFlatness(a) => run_experiment(Experiment::FalseFlatness, a),
        Command::LocalDynamics(a) => run_experiment(Experiment::LocalDynamics, a),
        Command::ImplicitBias(a) => run_experiment(Experiment::ImplicitBias, a),
        Command::Check => Ok(run_check()),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}
