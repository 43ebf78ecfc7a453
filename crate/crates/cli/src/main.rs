//! `empc` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime
//! failure, 3 check-suite failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Failure, PlotKind, PlotSpec};

#[derive(Parser, Debug)]
#[command(name = "empc", version, about = "Economic MPC experiments on the CSTR and test models")]
struct Cli {
    /// TOML run configuration; built-in CSTR defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set objective.alpha=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (same as `--set output.dir=...`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal steady pair of the configured model and stage cost.
    Steady,
    /// One open-loop solve from model.x0, with solver diagnostics.
    Openloop,
    /// Closed-loop simulation with quasi-steady tail report.
    Closedloop,
    /// Cartesian product of the sweep axes, or a terminal-bound sweep.
    Sweep,
    /// Gradient, shift-invariance, grid-search and scan checks.
    Check,
    /// Validate logs and write a plot spec for the renderer.
    PlotExport {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Input CSV; repeat for overlays.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Image the renderer should produce.
        #[arg(long)]
        output: PathBuf,
        /// Defaults to analysis.tail_fraction.
        #[arg(long)]
        tail_fraction: Option<f64>,
        /// Where to write the spec; `<output dir>/plot_spec.json` by default.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides;
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", toml::Value::String(out.display().to_string())));
    }
    let config = config::load(cli.config.as_deref(), &overrides).map_err(Failure::Config)?;
    let name = match &cli.command {
        Command::Steady => "steady",
        Command::Openloop => "openloop",
        Command::Closedloop => "closedloop",
        Command::Sweep => "sweep",
        Command::Check => "check",
        Command::PlotExport { .. } => "plot-export",
    };
    log::debug!("{name} with {config:?}");
    if let Command::PlotExport { kind, inputs, output, tail_fraction, spec } = cli.command {
        let spec_path = spec.unwrap_or_else(|| config.output.dir.join("plot_spec.json"));
        let spec = PlotSpec {
            inputs,
            kind,
            tail_fraction: tail_fraction.unwrap_or(config.analysis.tail_fraction),
            output,
        };
        return commands::plot_export(spec, &spec_path);
    }
    let resolved = config.resolve().map_err(Failure::Config)?;
    match cli.command {
        Command::Steady => commands::steady(&config, &resolved),
        Command::Openloop => commands::openloop(&config, &resolved),
        Command::Closedloop => commands::closedloop(&config, &resolved),
        Command::Sweep => commands::sweep(&config, &resolved),
        Command::Check => commands::check(&config, &resolved),
        Command::PlotExport { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Config(e) => eprintln!("configuration error: {e:#}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Checks => eprintln!("check suite failed"),
            }
            ExitCode::from(failure.exit_code())
        }
    }
}
