//! End-of-run tables and their CSV forms.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use super::metrics::{CorrectionAccuracy, EvalMetrics, RoundMetrics};
use crate::detection::{self, ClientPartition};
use crate::error::Result;
use crate::nn::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRow {
    pub client_id: usize,
    pub row_sum: f64,
    /// Posterior of the noisy component; empty when no mixture was fitted.
    pub responsibility_noisy: Option<f64>,
    pub assigned_group: &'static str,
    pub true_injected_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub partition: ClientPartition,
    pub rows: Vec<DetectionRow>,
    /// Whether the mixture fit failed and every client was declared clean.
    pub fell_back: bool,
}

impl DetectionReport {
    /// F1 of the detected noisy set, counting clients whose injected rate is
    /// at least `threshold` as truly noisy.
    pub fn f1_at(&self, threshold: f64) -> f64 {
        let truth: BTreeSet<usize> = self
            .rows
            .iter()
            .filter(|r| r.true_injected_rate >= threshold)
            .map(|r| r.client_id)
            .collect();
        detection::detection_f1(&self.partition, &truth)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionRow {
    pub client_id: usize,
    pub sample_index: usize,
    pub observed_label: usize,
    pub estimated_label: usize,
    pub max_confidence: f64,
}

pub fn write_correction_csv(path: impl AsRef<Path>, rows: &[CorrectionRow]) -> Result<()> {
    write_rows(path, rows)
}

fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a run produces besides the per-round stream.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rounds: Vec<RoundMetrics>,
    pub final_metrics: EvalMetrics,
    pub best_round: usize,
    pub best_metrics: EvalMetrics,
    pub detection: Option<DetectionReport>,
    pub correction: Vec<CorrectionRow>,
    pub correction_accuracy: Option<CorrectionAccuracy>,
    pub final_model: ModelParams,
}

/// Round with the highest macro-F1, earliest on ties.
pub fn best_round(rounds: &[RoundMetrics]) -> Option<&RoundMetrics> {
    rounds
        .iter()
        .fold(None, |best: Option<&RoundMetrics>, r| match best {
            Some(b) if b.macro_f1 >= r.macro_f1 => Some(b),
            _ => Some(r),
        })
}
