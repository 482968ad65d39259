use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scaledfx_cli::commands::{cmd_estimate, cmd_simulate, cmd_test, SimulateArgs};
use scaledfx_cli::config::AnalysisArgs;
use scaledfx_cli::report::Report;
use scaledfx_cli::{CliError, CliResult};

/// Doubly robust scaled treatment effects across multiple outcomes.
#[derive(Debug, Parser)]
#[command(name = "scaledfx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate scaled effects with intervals and covariance
    Estimate(AnalysisArgs),
    /// Test homogeneity of the scaled mean effects, overall and pairwise
    Test(AnalysisArgs),
    /// Run the built-in simulation study
    Simulate(SimulateArgs),
}

fn emit(report: &Report, output: Option<&Path>) -> CliResult<()> {
    print!("{}", report.to_human());
    if let Some(path) = output {
        std::fs::write(path, report.to_json()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Estimate(args) => {
            let config = args.resolve()?;
            emit(&cmd_estimate(&config)?, config.output.as_deref())
        }
        Command::Test(args) => {
            let config = args.resolve()?;
            emit(&cmd_test(&config)?, config.output.as_deref())
        }
        Command::Simulate(args) => emit(&cmd_simulate(&args)?, args.output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
