//! `fedmask` command-line runner.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 when a run fails.

mod config;
mod error;
mod output;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigArgs;
use crate::error::{CliError, CliResult};
use crate::output::{finish_manifest, run_into, write_csv, write_manifest, SummaryRow};

#[derive(Debug, Parser)]
#[command(name = "fedmask", version, about = "Federated training under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for client updates; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Train a grid over one or two parameters, several seeds per cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis as NAME=V1,V2,...; give it once or twice.
        #[arg(long = "param", required = true, num_args = 1)]
        params: Vec<String>,
        /// Consecutive seeds per cell, starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Mask on/off crossed with every aggregation rule.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn run(common: &Common) -> CliResult<()> {
    let cfg = common.config.resolve()?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    write_manifest(out, &cfg, "run")?;
    let report = run_into(out, &cfg, common.workers)?;
    let mut rows = vec![SummaryRow::new("masked_optim", &report)];
    if cfg.compare_baseline {
        let base = run_into(&out.join("fedavg"), &cfg.fedavg_baseline(), common.workers)?;
        rows.push(SummaryRow::new("fedavg", &base));
    }
    write_csv(&out.join("summary.csv"), &rows)?;
    finish_manifest(out)?;
    log::info!(
        "final macro-F1 {:.4}, best {:.4} at round {}",
        report.final_metrics.macro_f1,
        report.best_metrics.macro_f1,
        report.best_round
    );
    Ok(())
}

fn check_seeds(seeds: usize) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds: must be >= 1".into()));
    }
    Ok(())
}

fn failed_cells(n: usize, out: &Path) -> CliResult<()> {
    if n == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{n} run(s) failed, see status column under {}",
            out.display()
        )))
    }
}

fn sweep(common: &Common, params: &[String], seeds: usize) -> CliResult<()> {
    check_seeds(seeds)?;
    if params.len() > 2 {
        return Err(CliError::Config("--param: at most two axes".into()));
    }
    let axes = params
        .iter()
        .map(|p| sweep::parse_axis(p))
        .collect::<CliResult<Vec<_>>>()?;
    let base = common.config.table()?;
    let cfg = config::table_to_config(base.clone())?;
    std::fs::create_dir_all(&common.out)?;
    write_manifest(&common.out, &cfg, &format!("sweep {}", params.join(" ")))?;
    let failures = sweep::run_sweep(&base, &axes, cfg.seed, seeds, &common.out, common.workers)?;
    finish_manifest(&common.out)?;
    failed_cells(failures, &common.out)
}

fn ablate(common: &Common, seeds: usize) -> CliResult<()> {
    check_seeds(seeds)?;
    let base = common.config.table()?;
    let cfg = config::table_to_config(base.clone())?;
    std::fs::create_dir_all(&common.out)?;
    write_manifest(&common.out, &cfg, "ablate")?;
    let (_, failures) = sweep::run_ablation(&base, cfg.seed, seeds, &common.out, common.workers)?;
    finish_manifest(&common.out)?;
    failed_cells(failures, &common.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common } => run(common),
        Command::Sweep {
            common,
            params,
            seeds,
        } => sweep(common, params, *seeds),
        Command::Ablate { common, seeds } => ablate(common, *seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
