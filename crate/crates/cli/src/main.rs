//! Batch front end for bridge-function estimation.
//!
//! Four subcommands, all driven by a JSON config whose `task` tag must
//! match: `synthesize` draws data, `estimate` writes one report,
//! `study` runs a replication grid, `validate-config` only parses.
//! Results go to files, logs to stderr; stdout carries nothing unless
//! --print-summary is passed. On failure the last stderr line is a
//! machine-readable error JSON and the exit code is 2 for config or
//! validation problems, 1 for everything else.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use proxbridge_core::{Error, Result};

use crate::config::JobConfig;
use crate::run::{EstimateFlags, RunCtx};

#[derive(Parser)]
#[command(
    name = "proxbridge",
    version,
    about = "Causal effect estimation with negative-control proxies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic dataset: CSV, dims sidecar, and run manifest.
    Synthesize(SynthesizeArgs),
    /// Estimate the contrast functional and write a report JSON.
    Estimate(EstimateArgs),
    /// Run a replication study: per-cell CSV plus a summary JSON.
    Study(StudyArgs),
    /// Parse and validate a config file; writes nothing.
    ValidateConfig(ValidateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Job config JSON; its task tag must match the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output path (estimate) or stem (synthesize,
    /// study).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; the PROXBRIDGE_JOBS variable overrides this flag.
    #[arg(long)]
    jobs: Option<usize>,
    /// Print a one-line result summary to stdout.
    #[arg(long)]
    print_summary: bool,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides the CSV path of a csv data source; the sidecar is looked
    /// up next to it.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Switches the estimator family, keeping the configured nuisances.
    #[arg(long, value_enum)]
    estimator: Option<Family>,
    /// Fold count; dr-crossfit only.
    #[arg(long)]
    folds: Option<usize>,
    /// Embed the oracle value of J in the report (synthetic sources only).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ValidateArgs {
    /// Job config JSON.
    #[arg(long)]
    config: PathBuf,
}

/// Estimator families reachable from the command line.
#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Family {
    Ipw,
    Reg,
    Dr,
    DrCrossfit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            let json = serde_json::json!({
                "error": { "kind": kind, "message": e.to_string() }
            });
            eprintln!("{json}");
            ExitCode::from(if kind == "validation" { 2 } else { 1 })
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Validation(_) => "validation",
        Error::Computation(_) => "computation",
        Error::BridgeExistence(_) => "bridge_existence",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synthesize(args) => {
            run::configure_pool(args.common.jobs)?;
            let (cfg, ctx) = load(&args.common)?;
            match cfg {
                JobConfig::Synthesize(sc) => {
                    run::synthesize(sc, &ctx, args.common.seed, args.common.out)
                }
                other => Err(wrong_task("synthesize", other.task())),
            }
        }
        Cmd::Estimate(args) => {
            run::configure_pool(args.common.jobs)?;
            let (cfg, ctx) = load(&args.common)?;
            match cfg {
                JobConfig::Estimate(ec) => {
                    let flags = EstimateFlags {
                        data: args.data,
                        family: args.estimator,
                        folds: args.folds,
                        seed: args.common.seed,
                        out: args.common.out,
                        oracle: args.oracle,
                    };
                    run::estimate(ec, &ctx, flags)
                }
                other => Err(wrong_task("estimate", other.task())),
            }
        }
        Cmd::Study(args) => {
            run::configure_pool(args.common.jobs)?;
            let (cfg, ctx) = load(&args.common)?;
            match cfg {
                JobConfig::Study(sc) => run::study(sc, &ctx, args.common.seed, args.common.out),
                other => Err(wrong_task("study", other.task())),
            }
        }
        Cmd::ValidateConfig(args) => {
            let cfg = JobConfig::load(&args.config)?;
            eprintln!("ok: {} config {}", cfg.task(), args.config.display());
            Ok(())
        }
    }
}

fn load(common: &CommonArgs) -> Result<(JobConfig, RunCtx)> {
    let cfg = JobConfig::load(&common.config)?;
    let ctx =
        RunCtx { config_digest: cfg.digest(), print_summary: common.print_summary };
    Ok((cfg, ctx))
}

fn wrong_task(expected: &str, got: &str) -> Error {
    Error::validation(format!(
        "config has task {got:?} but the subcommand expects {expected:?}"
    ))
}
