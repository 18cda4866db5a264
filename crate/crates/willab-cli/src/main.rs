//! Batch experiment driver: scenario configs in, CSV/JSON-lines/snapshot
//! artifacts out.

mod config;
mod dispatch;
mod report;
mod scenario;
mod snapshot;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "willab", version, about = "Willmore free-boundary laboratory")]
struct Cli {
    /// Scenario configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: $WILLAB_OUT or ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sampling (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Discrete geometry checks of the configured reference.
    Geom {
        #[command(subcommand)]
        sub: GeomCommand,
    },
    /// Time integration of the free-boundary flow.
    Flow {
        #[command(subcommand)]
        sub: FlowCommand,
    },
    /// Gradient-inequality exponent estimation.
    Ls {
        #[command(subcommand)]
        sub: LsCommand,
    },
    /// Linearized operator analysis.
    Linop {
        #[command(subcommand)]
        sub: LinopCommand,
    },
}

#[derive(Subcommand)]
enum GeomCommand {
    /// Curvature and energy oracles, reference residuals, chart summary.
    Check,
}

#[derive(Subcommand)]
enum FlowCommand {
    /// Run the configured perturbation to convergence.
    Run,
    /// Amplitude ladder and the quantitative stability exponent.
    Stability,
}

#[derive(Subcommand)]
enum LsCommand {
    /// Willmore exponents along the flow and over sampled perturbations.
    Fit,
    /// Finite-dimensional laboratory on a built-in functional.
    Abstract,
}

#[derive(Subcommand)]
enum LinopCommand {
    /// Near-kernel and shifted-operator spectra at the reference.
    Spectrum,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon_pool(threads) {
            eprintln!("failed to configure {threads} threads: {e}");
            return ExitCode::from(5);
        }
    }

    let out_dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("WILLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    let Some(config_path) = cli.config.clone() else {
        eprintln!("--config is required");
        return ExitCode::from(3);
    };
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", config_path.display());
            return ExitCode::from(6);
        }
    };
    let mut raw = match config::parse_raw(&text) {
        Ok(r) => r,
        Err(errors) => {
            eprintln!("configuration errors:");
            for e in &errors {
                eprintln!("  {e}");
            }
            return ExitCode::from(3);
        }
    };
    if let Some(seed) = cli.seed {
        override_seeds(&mut raw, seed);
    }

    let result = match &cli.command {
        Command::Geom { sub: GeomCommand::Check } => dispatch::geom_check(&raw, &out_dir),
        Command::Flow { sub: FlowCommand::Run } => dispatch::flow_run(&raw, &out_dir),
        Command::Flow { sub: FlowCommand::Stability } => dispatch::flow_stability(&raw, &out_dir),
        Command::Ls { sub: LsCommand::Fit } => dispatch::ls_fit(&raw, &out_dir),
        Command::Ls { sub: LsCommand::Abstract } => dispatch::ls_abstract(&raw, &out_dir),
        Command::Linop { sub: LinopCommand::Spectrum } => {
            dispatch::linop_spectrum(&raw, &out_dir)
        }
    };

    match result {
        Ok(outcome) => {
            println!(
                "{}: {} ({} ms) -> {}",
                outcome.report.command,
                outcome.report.status,
                outcome.report.wall_ms,
                out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("{}", failure.describe());
            // even failed runs leave a report behind
            let report = report::RunReport {
                command: format!("{}", config_path.display()),
                config_hash: report::config_hash(&raw.canonical),
                artifact_version: env!("CARGO_PKG_VERSION"),
                schema_version: report::JSONL_SCHEMA_VERSION,
                status: format!("failed: {}", failure.describe().trim()),
                wall_ms: 0,
                payload: serde_json::Value::Null,
            };
            let _ = report::write_report(&out_dir, &report);
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}

fn rayon_pool(threads: usize) -> Result<(), String> {
    willab_core::configure_threads(threads).map_err(|e| e.to_string())
}

/// Force one seed into every section that accepts one.
fn override_seeds(raw: &mut config::RawConfig, seed: u64) {
    for section in ["perturbation", "analysis", "ls_abstract"] {
        raw.sections
            .entry(section.to_string())
            .or_default()
            .insert("seed".to_string(), (seed.to_string(), 0));
    }
    // keep the canonical text in sync for hashing
    let mut canonical = String::new();
    for (name, entries) in &raw.sections {
        canonical.push_str(&format!("[{name}]\n"));
        for (k, (v, _)) in entries {
            canonical.push_str(&format!("{k} = {v}\n"));
        }
    }
    raw.canonical = canonical;
}
