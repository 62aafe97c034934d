//! Client-side local updates and client selection.

use rand::seq::{index, SliceRandom};

use super::config::ExperimentConfig;
use crate::aggregation::pre_merge;
use crate::correction::{self, LabelBelief, MaskLossSource};
use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, ModelParams, OptimizerState};
use crate::rng::{self, tag, StreamRng};

/// Uniform sample of `clients_per_round` ids without replacement, sorted.
pub fn select_clients(round: usize, config: &ExperimentConfig) -> Vec<usize> {
    let n = config.partition.clients;
    let k = config.train.clients_per_round.min(n);
    let mut r = rng::stream(config.seed, &[tag::SELECTION, round as u64]);
    let mut ids = index::sample(&mut r, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Data-order stream of one client in one round.
pub fn client_stream(config: &ExperimentConfig, client_id: usize, round: usize) -> StreamRng {
    rng::stream(
        config.seed,
        &[tag::CLIENT_ORDER, client_id as u64, round as u64],
    )
}

/// Result of one local update.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean training loss over all batches.
    pub mean_loss: f64,
    pub num_samples: usize,
}

fn epoch_batches(n: usize, batch_size: usize, r: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_features(shard: &ClientShard, idx: &[usize]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = idx
        .iter()
        .map(|&i| shard.samples[i].features.as_slice())
        .collect();
    Matrix::from_rows(&rows)
}

fn all_features(shard: &ClientShard) -> Result<Matrix> {
    let rows: Vec<&[f64]> = shard.samples.iter().map(|s| s.features.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn optimizer(config: &ExperimentConfig) -> Result<OptimizerState> {
    let t = &config.train;
    OptimizerState::new(t.lr, t.momentum, t.weight_decay)
}

fn check_loss(loss: f64, shard: &ClientShard, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "client {} produced a non-finite loss in local epoch {epoch}",
            shard.client_id
        )))
    }
}

/// Warm-up / clean-client training: `E` epochs of mini-batch SGD on
/// cross-entropy, logit-adjusted by the shard's class prior when enabled.
pub fn local_update_clean(
    global: &ModelParams,
    shard: &ClientShard,
    config: &ExperimentConfig,
    r: &mut StreamRng,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Config(format!("client {} has no samples", shard.client_id)));
    }
    let mut params = global.clone();
    let mut opt = optimizer(config)?;
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for epoch in 0..config.train.local_epochs {
        for idx in epoch_batches(shard.len(), config.train.batch_size, r) {
            let x = batch_features(shard, &idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| shard.samples[i].observed_label).collect();
            let trace = nn::forward_trace(&params, &x)?;
            let lg = if config.train.logit_adjust {
                nn::ce_logit_adjusted(trace.logits(), &shard.class_prior, &labels)?
            } else {
                nn::cross_entropy(trace.logits(), &labels)?
            };
            check_loss(lg.loss, shard, epoch)?;
            let grads = nn::backward_trace(&params, &trace, &lg.grad)?;
            nn::sgd_step(&mut params, &grads, &mut opt)?;
            loss_sum += lg.loss;
            batches += 1;
        }
    }
    Ok(LocalOutcome {
        params,
        mean_loss: loss_sum / batches.max(1) as f64,
        num_samples: shard.len(),
    })
}

/// Noisy-client training: joint SGD on the model and gradient descent on the
/// label beliefs under the masked three-term objective, then one merge of
/// every belief with the trained model's prediction, then the pre-merge with
/// the received global model.
pub fn local_update_noisy(
    global: &ModelParams,
    shard: &ClientShard,
    beliefs: &mut [LabelBelief],
    config: &ExperimentConfig,
    r: &mut StreamRng,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Config(format!("client {} has no samples", shard.client_id)));
    }
    if beliefs.len() != shard.len() {
        return Err(Error::Shape(format!(
            "client {} has {} beliefs for {} samples",
            shard.client_id,
            beliefs.len(),
            shard.len()
        )));
    }
    let cc = &config.correction;
    let c = shard.num_classes;
    let mut params = global.clone();
    let mut opt = optimizer(config)?;
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for epoch in 0..config.train.local_epochs {
        for idx in epoch_batches(shard.len(), config.train.batch_size, r) {
            let x = batch_features(shard, &idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| shard.samples[i].observed_label).collect();
            let mut belief_logits = Matrix::zeros(idx.len(), c);
            for (row, &i) in idx.iter().enumerate() {
                belief_logits.row_mut(row).copy_from_slice(&beliefs[i].logits);
            }
            let trace = nn::forward_trace(&params, &x)?;
            let logits = trace.logits();
            let mask = if cc.mask && cc.beta != 0.0 {
                let losses = match cc.mask_loss_source {
                    MaskLossSource::Observed => nn::cross_entropy(logits, &labels)?.per_sample,
                    MaskLossSource::Belief => {
                        correction::classification_loss(logits, &belief_logits)?.per_sample
                    }
                };
                correction::valid_mask(&losses, cc.tau)
            } else {
                vec![true; idx.len()]
            };
            let t = correction::triplet_loss(logits, &belief_logits, &labels, &mask, cc.alpha, cc.beta)?;
            check_loss(t.loss, shard, epoch)?;
            let grads = nn::backward_trace(&params, &trace, &t.grad_logits)?;
            nn::sgd_step(&mut params, &grads, &mut opt)?;
            if !cc.freeze_beliefs {
                for (row, &i) in idx.iter().enumerate() {
                    correction::belief_step(&mut beliefs[i], t.grad_beliefs.row(row), cc.eta);
                }
            }
            loss_sum += t.loss;
            batches += 1;
        }
    }
    if !cc.freeze_beliefs {
        let probs = nn::softmax_rows(&nn::forward(&params, &all_features(shard)?)?);
        for (i, b) in beliefs.iter_mut().enumerate() {
            correction::merge_belief(b, probs.row(i), cc.k);
        }
    }
    Ok(LocalOutcome {
        params: pre_merge(&params, global, cc.zeta)?,
        mean_loss: loss_sum / batches.max(1) as f64,
        num_samples: shard.len(),
    })
}
