//! Learnable label beliefs and the masked three-term objective used by
//! clients flagged as noisy.
//!
//! Each sample of a noisy client carries a free logit vector `belief` whose
//! softmax is the current soft estimate of its true label. The local
//! objective is
//!
//! ```text
//! L = L_c + alpha * L_comp + beta * L_e
//! L_c    = mean_i  -sum_c y_ic log p_ic          (model vs. soft label)
//! L_comp = mean_i  -log y_i[observed_i]          (soft label vs. observed)
//! L_e    = sum_i m_i H(p_i) / max(sum_i m_i, 1)  (masked prediction entropy)
//! ```
//!
//! with `p = softmax(model logits)`, `y = softmax(belief)` and `m` the
//! small-loss mask. Gradients w.r.t. the model logits and the beliefs are
//! returned separately; the model half goes through backprop + SGD, the
//! belief half through a plain gradient step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, log_softmax, softmax, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBelief {
    /// Unnormalised label logits.
    pub logits: Vec<f64>,
}

impl LabelBelief {
    /// Current soft label.
    pub fn soft_label(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn estimated_label(&self) -> usize {
        estimated_label(self)
    }

    pub fn max_confidence(&self) -> f64 {
        self.soft_label().into_iter().fold(0.0, f64::max)
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }
}

/// Belief initialised to `K * onehot(observed)`.
pub fn init_belief(observed_label: usize, num_classes: usize, k: f64) -> LabelBelief {
    let mut logits = vec![0.0; num_classes];
    logits[observed_label] = k;
    LabelBelief { logits }
}

/// Argmax with ties going to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax of the belief logits (softmax is monotone, so this is also the
/// argmax of the soft label).
pub fn estimated_label(belief: &LabelBelief) -> usize {
    argmax(&belief.logits)
}

/// Keep the `ceil(tau * |B| / 100)` samples with the smallest loss; ties go to
/// the earlier batch position.
pub fn valid_mask(per_sample_losses: &[f64], tau_percent: f64) -> Vec<bool> {
    let n = per_sample_losses.len();
    let keep = ((tau_percent * n as f64 / 100.0).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        per_sample_losses[a]
            .total_cmp(&per_sample_losses[b])
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// Which per-sample loss ranks samples for the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossSource {
    /// Cross-entropy of the model against the observed label.
    #[default]
    Observed,
    /// Soft-label classification loss against the current belief.
    Belief,
}

/// Loss value with gradients w.r.t. both optimised variables.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// d loss / d model logits; `None` when the term does not touch the model.
    pub grad_logits: Option<Matrix>,
    /// d loss / d belief logits; `None` when the term does not touch beliefs.
    pub grad_beliefs: Option<Matrix>,
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `L_c`: soft-target cross-entropy of the model against `softmax(belief)`.
pub fn classification_loss(model_logits: &Matrix, belief_logits: &Matrix) -> Result<JointLoss> {
    check_pair(model_logits, belief_logits)?;
    let targets = nn::softmax_rows(belief_logits);
    let ce = nn::soft_target_cross_entropy(model_logits, &targets)?;
    let b = model_logits.rows();
    let scale = 1.0 / b.max(1) as f64;
    let mut grad_y = Matrix::zeros(b, model_logits.cols());
    for i in 0..b {
        let neg_logp: Vec<f64> = log_softmax(model_logits.row(i))
            .into_iter()
            .map(|v| -v)
            .collect();
        let y = targets.row(i);
        let li = ce.per_sample[i];
        for ((g, yj), lj) in grad_y.row_mut(i).iter_mut().zip(y).zip(&neg_logp) {
            *g = yj * (lj - li) * scale;
        }
    }
    Ok(JointLoss {
        loss: ce.loss,
        per_sample: ce.per_sample,
        grad_logits: Some(ce.grad),
        grad_beliefs: Some(grad_y),
    })
}

/// `-log softmax(belief)[observed]` and its gradient w.r.t. the belief logits.
pub fn compatibility_loss(observed_label: usize, belief: &LabelBelief) -> Result<(f64, Vec<f64>)> {
    let c = belief.num_classes();
    if observed_label >= c {
        return Err(Error::Index {
            label: observed_label,
            num_classes: c,
        });
    }
    let loss = -log_softmax(&belief.logits)[observed_label];
    let mut grad = belief.soft_label();
    grad[observed_label] -= 1.0;
    Ok((loss, grad))
}

/// Mean prediction entropy over the samples the mask keeps.
pub fn masked_entropy(model_logits: &Matrix, mask: &[bool]) -> Result<JointLoss> {
    if mask.len() != model_logits.rows() {
        return Err(Error::Shape(format!(
            "mask has {} entries for a batch of {}",
            mask.len(),
            model_logits.rows()
        )));
    }
    let kept = mask.iter().filter(|m| **m).count();
    let denom = 1.0 / kept.max(1) as f64;
    let mut grad = Matrix::zeros(model_logits.rows(), model_logits.cols());
    let mut per_sample = Vec::with_capacity(mask.len());
    let mut total = 0.0;
    for (i, &keep) in mask.iter().enumerate() {
        let logp = log_softmax(model_logits.row(i));
        let h = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
        per_sample.push(h);
        if !keep {
            continue;
        }
        total += h;
        for (g, l) in grad.row_mut(i).iter_mut().zip(&logp) {
            *g = -l.exp() * (l + h) * denom;
        }
    }
    Ok(JointLoss {
        loss: total * denom,
        per_sample,
        grad_logits: Some(grad),
        grad_beliefs: None,
    })
}

/// Components of one evaluation of the noisy-client objective.
#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    pub classification: f64,
    pub compatibility: f64,
    pub entropy: f64,
    pub grad_logits: Matrix,
    pub grad_beliefs: Matrix,
}

/// `L_c + alpha * L_comp + beta * L_e`. Terms with a zero weight are skipped
/// entirely, so `alpha = beta = 0` yields exactly the `L_c` gradients.
pub fn triplet_loss(
    model_logits: &Matrix,
    belief_logits: &Matrix,
    observed_labels: &[usize],
    mask: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<TripletLoss> {
    if observed_labels.len() != model_logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            observed_labels.len(),
            model_logits.rows()
        )));
    }
    let lc = classification_loss(model_logits, belief_logits)?;
    let mut grad_logits = lc.grad_logits.expect("L_c touches the model");
    let mut grad_beliefs = lc.grad_beliefs.expect("L_c touches the beliefs");
    let b = model_logits.rows();
    let scale = 1.0 / b.max(1) as f64;

    let mut compatibility = 0.0;
    if alpha != 0.0 {
        for (i, &y) in observed_labels.iter().enumerate() {
            let belief = LabelBelief {
                logits: belief_logits.row(i).to_vec(),
            };
            let (l, g) = compatibility_loss(y, &belief)?;
            compatibility += l;
            for (acc, gj) in grad_beliefs.row_mut(i).iter_mut().zip(g) {
                *acc += alpha * gj * scale;
            }
        }
        compatibility *= scale;
    }

    let mut entropy = 0.0;
    if beta != 0.0 {
        let le = masked_entropy(model_logits, mask)?;
        entropy = le.loss;
        let g = le.grad_logits.expect("entropy touches the model");
        for (acc, gj) in grad_logits.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *acc += beta * gj;
        }
    }

    Ok(TripletLoss {
        loss: lc.loss + alpha * compatibility + beta * entropy,
        classification: lc.loss,
        compatibility,
        entropy,
        grad_logits,
        grad_beliefs,
    })
}

/// Plain gradient descent on the belief logits.
pub fn belief_step(belief: &mut LabelBelief, grad: &[f64], eta: f64) {
    for (y, g) in belief.logits.iter_mut().zip(grad) {
        *y -= eta * g;
    }
}

/// Average the model's prediction with the current soft label and rescale:
/// `belief <- K * (p_model + softmax(belief)) / 2`.
pub fn merge_belief(belief: &mut LabelBelief, model_probs: &[f64], k: f64) {
    let soft = belief.soft_label();
    for ((y, p), s) in belief.logits.iter_mut().zip(model_probs).zip(soft) {
        *y = k * (p + s) / 2.0;
    }
}

/// Belief slices of every noisy client that has trained in the correction
/// stage, keyed by client id.
#[derive(Debug, Clone, Default)]
pub struct BeliefStore {
    persist: bool,
    slices: BTreeMap<usize, Vec<LabelBelief>>,
}

impl BeliefStore {
    pub fn new(persist: bool) -> Self {
        Self {
            persist,
            slices: BTreeMap::new(),
        }
    }

    pub fn persists(&self) -> bool {
        self.persist
    }

    pub fn get(&self, client_id: usize) -> Option<&[LabelBelief]> {
        self.slices.get(&client_id).map(Vec::as_slice)
    }

    pub fn contains(&self, client_id: usize) -> bool {
        self.slices.contains_key(&client_id)
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.keys().copied()
    }

    /// Hand a client's beliefs to its local update. Persisted beliefs are
    /// returned as stored; otherwise (first participation, or persistence off)
    /// they are freshly initialised from the observed labels.
    pub fn checkout(
        &mut self,
        client_id: usize,
        observed_labels: &[usize],
        num_classes: usize,
        k: f64,
    ) -> Vec<LabelBelief> {
        match self.slices.remove(&client_id) {
            Some(slice) if self.persist && slice.len() == observed_labels.len() => slice,
            _ => observed_labels
                .iter()
                .map(|&y| init_belief(y, num_classes, k))
                .collect(),
        }
    }

    pub fn insert(&mut self, client_id: usize, beliefs: Vec<LabelBelief>) {
        self.slices.insert(client_id, beliefs);
    }
}
