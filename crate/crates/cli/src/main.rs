use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toda_cli::commands::{cmd_barriers, cmd_oracle, cmd_solve, cmd_sweep, cmd_validate, Context};
use toda_cli::config::Overrides;
use toda_core::solver::Method;

/// Dirichlet solver and certificate bench for the cyclic Toda system.
#[derive(Parser)]
#[command(name = "toda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem and certify the result.
    Solve(Common),
    /// Re-run the certificates on a stored solution.
    Validate {
        #[command(flatten)]
        common: Common,
        /// TDGRID1 file to check.
        #[arg(long)]
        solution: PathBuf,
    },
    /// Solve every member of the configured family.
    Sweep(Common),
    /// Build and verify the barrier pair only.
    Barriers(Common),
    /// Radial reference solution for a rotationally symmetric config.
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    tol_res: Option<f64>,
    #[arg(long)]
    tol_fp: Option<f64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| format!("expected newton or picard, got `{s}`"))
}

impl Common {
    fn context(&self) -> Context {
        Context {
            config: self.config.clone(),
            out: self.out.clone(),
            jobs: self.jobs,
            overrides: Overrides {
                method: self.method,
                tol_res: self.tol_res,
                tol_fp: self.tol_fp,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let code = match &cli.command {
        Command::Solve(c) => cmd_solve(&c.context()),
        Command::Validate { common, solution } => cmd_validate(&common.context(), solution),
        Command::Sweep(c) => cmd_sweep(&c.context()),
        Command::Barriers(c) => cmd_barriers(&c.context()),
        Command::Oracle(c) => cmd_oracle(&c.context()),
    };
    ExitCode::from(code as u8)
}
