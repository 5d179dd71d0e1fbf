//! `geocalc`: verification suites, convergence sweeps and single-shot
//! evaluations driven by a TOML run configuration.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Failure, Outcome};

#[derive(Debug, Parser)]
#[command(name = "geocalc", version, about = "Geodesic-expansion calculus with numerical oracles")]
#[command(allow_negative_numbers = true)]
pub struct Cli {
    /// Run configuration (TOML); the shipped default is used when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Where to write the CSV report.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the immersion grid (points per axis).
    #[arg(long, global = true, value_name = "N")]
    pub grid: Option<usize>,
    /// Overrides the geodesic integrator tolerance.
    #[arg(long, global = true, value_name = "X")]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an acceptance suite: geodesic, haar, immersion, diffeo, gauge, action or all.
    Verify { suite: String },
    /// Convergence sweep of one check; prints (scale, error) rows and the fitted slope.
    Sweep {
        check: String,
        /// Comma-separated scales; defaults to the configured ones.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Exact geodesics on a configured manifold.
    Geodesic {
        #[command(subcommand)]
        action: GeodesicCommand,
    },
    /// Geometry of an immersion.
    Immersion {
        #[command(subcommand)]
        action: ImmersionCommand,
    },
    /// Gauge-fixed log-integrand, FP determinant and measure terms for the configured field.
    Measure,
    /// Semiclassical action expansion against the exact area.
    Action,
}

#[derive(Debug, Subcommand)]
pub enum GeodesicCommand {
    /// Integrate from a point with an initial velocity.
    Shoot {
        #[arg(long, value_delimiter = ',', required = true)]
        point: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        velocity: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        time: f64,
        /// Index into the configured manifolds.
        #[arg(long, default_value_t = 0)]
        manifold: usize,
    },
    /// Initial velocity of the geodesic joining two points.
    Log {
        #[arg(long, value_delimiter = ',', required = true)]
        from: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        to: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        manifold: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum ImmersionCommand {
    /// Frame, structure-equation residuals and volume.
    Report {
        /// Builtin immersion; defaults to the configured one.
        #[arg(long)]
        builtin: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(Outcome { text, report, passed }) => {
            print!("{text}");
            if let Some((path, csv)) = report {
                if let Err(e) = std::fs::write(&path, csv) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
