//! Test-set evaluation and per-round records.

use serde::{Deserialize, Serialize};

use crate::correction::{BeliefStore, LabelBelief};
use crate::dataset::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, ModelParams};

/// Macro-averaged classification scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Scores from predicted and true labels. Per-class ratios with a zero
/// denominator count as 0.
pub fn scores_from_predictions(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<EvalMetrics> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Index {
                label: p.max(t),
                num_classes,
            });
        }
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut prec, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        let p = ratio(tp[c], pred_count[c]);
        let r = ratio(tp[c], true_count[c]);
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let c = num_classes as f64;
    Ok(EvalMetrics {
        macro_precision: prec / c,
        macro_recall: rec / c,
        macro_f1: f1 / c,
        accuracy: ratio(tp.iter().sum(), truth.len()),
    })
}

/// Argmax predictions of `params` on `test`, scored against the true labels.
pub fn evaluate(params: &ModelParams, test: &LabeledDataset) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    if let Some(c) = test.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("test set has no samples of class {c}")));
    }
    let rows: Vec<&[f64]> = test.samples.iter().map(|s| s.features.as_slice()).collect();
    let logits = nn::forward(params, &Matrix::from_rows(&rows)?)?;
    let predicted: Vec<usize> = logits.iter_rows().map(crate::correction::argmax).collect();
    let truth: Vec<usize> = test.samples.iter().map(|s| s.true_label).collect();
    scores_from_predictions(&predicted, &truth, test.num_classes)
}

/// Agreement of estimated labels with the true labels on noisy clients,
/// next to the agreement of the observed labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAccuracy {
    pub estimated: f64,
    pub observed: f64,
    pub samples: usize,
}

/// `None` when no client holds beliefs yet.
pub fn correction_accuracy<'a>(
    clients: impl IntoIterator<Item = (&'a ClientShard, &'a [LabelBelief])>,
) -> Option<CorrectionAccuracy> {
    let (mut est, mut obs, mut n) = (0usize, 0usize, 0usize);
    for (shard, beliefs) in clients {
        for (s, b) in shard.samples.iter().zip(beliefs) {
            est += usize::from(b.estimated_label() == s.true_label);
            obs += usize::from(s.observed_label == s.true_label);
            n += 1;
        }
    }
    (n > 0).then(|| CorrectionAccuracy {
        estimated: est as f64 / n as f64,
        observed: obs as f64 / n as f64,
        samples: n,
    })
}

/// Correction accuracy over every shard that has beliefs in `store`.
pub fn store_correction_accuracy(
    shards: &[ClientShard],
    store: &BeliefStore,
) -> Option<CorrectionAccuracy> {
    correction_accuracy(
        shards
            .iter()
            .filter_map(|s| store.get(s.client_id).map(|b| (s, b))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Correction,
}

/// One record per communication round. Wall time is kept out of the
/// serialized form so that metric streams are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub stage: Stage,
    pub selected: Vec<usize>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub mean_train_loss: f64,
    pub clean_selected: usize,
    pub noisy_selected: usize,
    pub correction_accuracy: Option<f64>,
    pub observed_label_accuracy: Option<f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RoundMetrics {
    pub fn eval(&self) -> EvalMetrics {
        EvalMetrics {
            macro_precision: self.macro_precision,
            macro_recall: self.macro_recall,
            macro_f1: self.macro_f1,
            accuracy: self.accuracy,
        }
    }
}
