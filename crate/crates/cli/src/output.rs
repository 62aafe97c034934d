//! Run artifacts: manifest, metric stream, timing and end-of-run tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use fedmask::orchestrator::{run_experiment_with, ExperimentConfig, ExperimentReport, RunOptions};
use fedmask::orchestrator::report::write_correction_csv;
use serde::Serialize;

use crate::config::to_toml;
use crate::error::{CliError, CliResult};

/// Injected rate at or above which a client counts as truly noisy when
/// scoring detection.
pub const DETECTION_TRUTH_THRESHOLD: f64 = 0.4;

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Resolved config preceded by `#` metadata lines. The file parses back as
/// plain TOML since the metadata are comments.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, command: &str) -> CliResult<()> {
    let mut text = String::new();
    text.push_str(&format!("# fedmask {}\n", fedmask::VERSION));
    text.push_str(&format!("# command: {command}\n"));
    text.push_str(&format!("# out_dir: {}\n", dir.display()));
    text.push_str(&format!("# started_unix: {}\n", unix_now()));
    text.push_str(&to_toml(cfg)?);
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

pub fn finish_manifest(dir: &Path) -> CliResult<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(dir.join("manifest.txt"))?;
    writeln!(f, "# finished_unix: {}", unix_now())?;
    Ok(())
}

/// Train one configuration, streaming `metrics.jsonl` and writing the
/// remaining per-run files into `dir`.
pub fn run_into(dir: &Path, cfg: &ExperimentConfig, workers: usize) -> CliResult<ExperimentReport> {
    fs::create_dir_all(dir)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut timing = csv::Writer::from_path(dir.join("timing.csv")).map_err(runtime)?;
    timing
        .write_record(["round", "wall_time_secs"])
        .map_err(runtime)?;
    let report = run_experiment_with(cfg, RunOptions { workers }, |m| {
        let line = serde_json::to_string(m)
            .map_err(|e| fedmask::Error::Parse(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        timing.write_record([m.round.to_string(), format!("{:.6}", m.wall_time_secs)])?;
        Ok(())
    })?;
    timing.flush()?;
    if let Some(det) = &report.detection {
        det.write_csv(dir.join("detection.csv"))?;
    }
    write_correction_csv(dir.join("correction.csv"), &report.correction)?;
    Ok(report)
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub final_macro_precision: f64,
    pub final_macro_recall: f64,
    pub final_macro_f1: f64,
    pub final_accuracy: f64,
    pub best_round: usize,
    pub best_macro_f1: f64,
    pub correction_accuracy: Option<f64>,
    pub observed_label_accuracy: Option<f64>,
    pub detection_f1: Option<f64>,
}

impl SummaryRow {
    pub fn new(variant: &str, r: &ExperimentReport) -> Self {
        Self {
            variant: variant.to_string(),
            final_macro_precision: r.final_metrics.macro_precision,
            final_macro_recall: r.final_metrics.macro_recall,
            final_macro_f1: r.final_metrics.macro_f1,
            final_accuracy: r.final_metrics.accuracy,
            best_round: r.best_round,
            best_macro_f1: r.best_metrics.macro_f1,
            correction_accuracy: r.correction_accuracy.map(|c| c.estimated),
            observed_label_accuracy: r.correction_accuracy.map(|c| c.observed),
            detection_f1: r
                .detection
                .as_ref()
                .map(|d| d.f1_at(DETECTION_TRUTH_THRESHOLD)),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush()?;
    Ok(())
}
