//! Noisy-client detection from per-class loss profiles.
//!
//! Each client evaluates the warmed-up global model on its own data and
//! reports the mean cross-entropy per observed class. The server stacks these
//! into an `N x C` loss matrix, fits a two-component diagonal Gaussian mixture
//! by EM, and calls the component with the larger loss the noisy group.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::dataset::ClientShard;
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, ModelParams};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Mean plain cross-entropy per observed class; `None` for classes the shard
/// does not contain.
pub fn per_class_losses(params: &ModelParams, shard: &ClientShard) -> Result<Vec<Option<f64>>> {
    let c = shard.num_classes;
    if shard.is_empty() {
        return Ok(vec![None; c]);
    }
    let rows: Vec<&[f64]> = shard.samples.iter().map(|s| s.features.as_slice()).collect();
    let x = Matrix::from_rows(&rows)?;
    let labels: Vec<usize> = shard.samples.iter().map(|s| s.observed_label).collect();
    let logits = nn::forward(params, &x)?;
    let ce = nn::cross_entropy(&logits, &labels)?;
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for (&y, l) in labels.iter().zip(&ce.per_sample) {
        sums[y] += l;
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Per-client, per-class losses with imputed gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub rows: Vec<Vec<f64>>,
    pub client_ids: Vec<usize>,
    /// `true` where the entry was imputed.
    pub fill_mask: Vec<Vec<bool>>,
}

impl LossMatrix {
    pub fn num_clients(&self) -> usize {
        self.rows.len()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Stack client loss vectors, filling absent classes with the mean of that
/// column over clients that have the class (or `ln C` if none do).
pub fn assemble_loss_matrix(vectors: &[(usize, Vec<Option<f64>>)]) -> Result<LossMatrix> {
    let Some((_, first)) = vectors.first() else {
        return Err(Error::Config("loss matrix needs at least one client".into()));
    };
    let c = first.len();
    if let Some((id, v)) = vectors.iter().find(|(_, v)| v.len() != c) {
        return Err(Error::Shape(format!(
            "client {id} reported {} class losses, expected {c}",
            v.len()
        )));
    }
    let fallback = (c as f64).ln();
    let column_means: Vec<f64> = (0..c)
        .map(|j| {
            let present: Vec<f64> = vectors.iter().filter_map(|(_, v)| v[j]).collect();
            if present.is_empty() {
                fallback
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    let rows = vectors
        .iter()
        .map(|(_, v)| {
            v.iter()
                .zip(&column_means)
                .map(|(e, m)| e.unwrap_or(*m))
                .collect()
        })
        .collect();
    let fill_mask = vectors
        .iter()
        .map(|(_, v)| v.iter().map(Option::is_none).collect())
        .collect();
    Ok(LossMatrix {
        rows,
        client_ids: vectors.iter().map(|(id, _)| *id).collect(),
        fill_mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GmmComponent {
    fn log_density(&self, x: &[f64]) -> f64 {
        -0.5 * x
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((xi, m), v)| (2.0 * PI * v).ln() + (xi - m).powi(2) / v)
            .sum::<f64>()
    }

    pub fn mean_sum(&self) -> f64 {
        self.mean.iter().sum()
    }
}

/// Two-component diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: [GmmComponent; 2],
    /// Log-likelihood before each M-step.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmModel {
    fn joint_log(&self, x: &[f64]) -> [f64; 2] {
        let [a, b] = &self.components;
        [
            a.weight.ln() + a.log_density(x),
            b.weight.ln() + b.log_density(x),
        ]
    }

    /// Posterior component probabilities of one row.
    pub fn responsibilities(&self, x: &[f64]) -> [f64; 2] {
        let [l0, l1] = self.joint_log(x);
        let norm = log_add(l0, l1);
        [(l0 - norm).exp(), (l1 - norm).exp()]
    }

    pub fn log_likelihood(&self, rows: &[Vec<f64>]) -> f64 {
        rows.iter()
            .map(|x| {
                let [l0, l1] = self.joint_log(x);
                log_add(l0, l1)
            })
            .sum()
    }
}

fn m_step(rows: &[Vec<f64>], resp: &[[f64; 2]], prev: Option<&GmmModel>) -> [GmmComponent; 2] {
    let n = rows.len() as f64;
    let c = rows[0].len();
    let mut out: Vec<GmmComponent> = Vec::with_capacity(2);
    for k in 0..2 {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        if nk < 1e-12 {
            // Empty component: keep its previous shape with negligible weight.
            let mut comp = prev.map(|p| p.components[k].clone()).unwrap_or(GmmComponent {
                weight: 0.0,
                mean: vec![0.0; c],
                variance: vec![1.0; c],
            });
            comp.weight = 1e-12;
            out.push(comp);
            continue;
        }
        let mut mean = vec![0.0; c];
        for (x, r) in rows.iter().zip(resp) {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += r[k] * xi;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut variance = vec![0.0; c];
        for (x, r) in rows.iter().zip(resp) {
            for ((v, xi), m) in variance.iter_mut().zip(x).zip(&mean) {
                *v += r[k] * (xi - m).powi(2);
            }
        }
        variance
            .iter_mut()
            .for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
        out.push(GmmComponent {
            weight: nk / n,
            mean,
            variance,
        });
    }
    let total: f64 = out.iter().map(|c| c.weight).sum();
    out.iter_mut().for_each(|c| c.weight /= total);
    let b = out.pop().expect("two components");
    let a = out.pop().expect("two components");
    [a, b]
}

/// Fit the mixture by EM. Rows are initially split at the median row sum
/// (lower half to component 0); iteration stops once the log-likelihood gain
/// drops below `tol` or after `max_iters` E-steps.
pub fn fit_gmm2(matrix: &LossMatrix, max_iters: usize, tol: f64) -> Result<GmmModel> {
    let rows = &matrix.rows;
    if rows.len() < 2 {
        return Err(Error::Detection(format!(
            "need at least 2 clients to fit a mixture, got {}",
            rows.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Detection("loss matrix has non-finite entries".into()));
    }
    let sums = matrix.row_sums();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
    let mut resp = vec![[0.0, 0.0]; rows.len()];
    let half = rows.len() / 2;
    for (rank, &i) in order.iter().enumerate() {
        resp[i] = if rank < half { [1.0, 0.0] } else { [0.0, 1.0] };
    }
    let mut model = GmmModel {
        components: m_step(rows, &resp, None),
        log_likelihood_trace: Vec::new(),
        converged: false,
    };
    for _ in 0..max_iters.max(1) {
        let ll = model.log_likelihood(rows);
        if let Some(&prev) = model.log_likelihood_trace.last() {
            if ll - prev < tol {
                model.log_likelihood_trace.push(ll);
                model.converged = true;
                break;
            }
        }
        model.log_likelihood_trace.push(ll);
        for (r, x) in resp.iter_mut().zip(rows) {
            *r = model.responsibilities(x);
        }
        model.components = m_step(rows, &resp, Some(&model));
    }
    Ok(model)
}

/// Clean/noisy split of the federation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientPartition {
    pub clean_ids: BTreeSet<usize>,
    pub noisy_ids: BTreeSet<usize>,
}

impl ClientPartition {
    pub fn all_clean(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            clean_ids: ids.into_iter().collect(),
            noisy_ids: BTreeSet::new(),
        }
    }

    pub fn all_noisy(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            clean_ids: BTreeSet::new(),
            noisy_ids: ids.into_iter().collect(),
        }
    }

    pub fn is_noisy(&self, id: usize) -> bool {
        self.noisy_ids.contains(&id)
    }
}

/// Index (0 or 1) of the component with the larger mean loss, or `None` when
/// the two components are not separated.
fn noisy_component(gmm: &GmmModel, matrix: &LossMatrix) -> (Option<usize>, Vec<usize>) {
    let [a, b] = &gmm.components;
    let c = matrix.num_classes().max(2);
    let (sa, sb) = (a.mean_sum(), b.mean_sum());
    let lower = if sb < sa { 1 } else { 0 };
    let assignment: Vec<usize> = matrix
        .rows
        .iter()
        .map(|x| {
            let r = gmm.responsibilities(x);
            if r[0] > r[1] {
                0
            } else if r[1] > r[0] {
                1
            } else {
                lower
            }
        })
        .collect();
    if (sa - sb).abs() < 1e-3 * (c as f64).ln() {
        return (None, assignment);
    }
    let sums = matrix.row_sums();
    let mut group_sum = [0.0; 2];
    let mut group_n = [0usize; 2];
    for (k, s) in assignment.iter().zip(&sums) {
        group_sum[*k] += s;
        group_n[*k] += 1;
    }
    if group_n.contains(&0) {
        return (None, assignment);
    }
    let m0 = group_sum[0] / group_n[0] as f64;
    let m1 = group_sum[1] / group_n[1] as f64;
    (Some(if m1 > m0 { 1 } else { 0 }), assignment)
}

/// Assign each client to its more probable component; the component with
/// the higher mean row sum is noisy. Unseparated mixtures mark everyone clean.
pub fn partition_clients(gmm: &GmmModel, matrix: &LossMatrix) -> ClientPartition {
    let (noisy, assignment) = noisy_component(gmm, matrix);
    let Some(noisy) = noisy else {
        return ClientPartition::all_clean(matrix.client_ids.iter().copied());
    };
    let mut out = ClientPartition::default();
    for (id, k) in matrix.client_ids.iter().zip(assignment) {
        if k == noisy {
            out.noisy_ids.insert(*id);
        } else {
            out.clean_ids.insert(*id);
        }
    }
    out
}

/// Posterior probability of the noisy component per row (0 when the mixture
/// is unseparated).
pub fn noisy_responsibilities(gmm: &GmmModel, matrix: &LossMatrix) -> Vec<f64> {
    match noisy_component(gmm, matrix).0 {
        Some(k) => matrix
            .rows
            .iter()
            .map(|x| gmm.responsibilities(x)[k])
            .collect(),
        None => vec![0.0; matrix.num_clients()],
    }
}

/// F1 of the detected noisy set against a reference set of noisy clients.
pub fn detection_f1(partition: &ClientPartition, truly_noisy: &BTreeSet<usize>) -> f64 {
    let predicted = &partition.noisy_ids;
    if predicted.is_empty() && truly_noisy.is_empty() {
        return 1.0;
    }
    let tp = predicted.intersection(truly_noisy).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / predicted.len() as f64;
    let recall = tp / truly_noisy.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
