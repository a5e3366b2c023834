//! `emla` command line: efficiency maps, fixed-design simulation, link-length
//! optimization and the invariant suite for a scenario file.

mod commands;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emla_core::Error;

#[derive(Parser)]
#[command(
    name = "emla",
    version,
    about = "Energy-aware link-length design for EMLA-driven closed chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and export the efficiency map of every actuator.
    Effmap(RunArgs),
    /// Inverse dynamics and energy along the reference with the initial design.
    Simulate(RunArgs),
    /// Optimize link lengths and spline coefficients.
    Optimize(RunArgs),
    /// Run the invariant suite and print one pass/fail line per check.
    Validate(RunArgs),
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (created when missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the solver seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the solver iteration limit.
    #[arg(long)]
    pub max_iter: Option<usize>,
}

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Model(Error),
    Validation(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Model(e)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Range(_) => "range",
        Error::GeometryInfeasible(_) => "geometry_infeasible",
        Error::NearSingular(_) => "near_singular",
        Error::StrokeLimit { .. } => "stroke_limit",
        Error::ModelInconsistency(_) => "model_inconsistency",
        Error::Configuration(_) => "configuration",
        Error::Fitting(_) => "fitting",
        Error::Reachability { .. } => "reachability",
        Error::MapNode { .. } => "map_node",
        Error::SolverBreakdown { .. } => "solver_breakdown",
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Model(Error::Io { .. } | Error::Parse { .. }) => 4,
            Failure::Model(Error::SolverBreakdown { .. }) => 3,
            _ => 2,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Failure::Model(e) => {
                let mut v = serde_json::json!({
                    "error": error_kind(e),
                    "message": e.to_string(),
                    "exit_code": self.exit_code(),
                });
                match e {
                    Error::Reachability { times } => v["times"] = serde_json::json!(times),
                    Error::SolverBreakdown {
                        iterations,
                        last_iterate,
                        ..
                    } => {
                        v["iterations"] = serde_json::json!(iterations);
                        v["last_iterate"] = serde_json::json!(last_iterate);
                    }
                    _ => {}
                }
                v
            }
            Failure::Validation(failed) => serde_json::json!({
                "error": "validation",
                "message": format!("{} check(s) failed: {}", failed.len(), failed.join("; ")),
                "failed": failed,
                "exit_code": self.exit_code(),
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Effmap(a) => commands::effmap(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Validate(a) => validate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code())
        }
    }
}
