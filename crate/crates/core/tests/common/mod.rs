//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the library's loss or gradient code.

#![allow(dead_code)]

use fedmask::aggregation::{self, GeometricMedianOptions};
use fedmask::correction::{self, LabelBelief};
use fedmask::dataset::{self, ClientShard, NoiseKind, Sample};
use fedmask::detection::{self, LossMatrix};
use fedmask::nn::{self, Architecture, Matrix, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

// ---------- naive math ----------

pub fn naive_log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    naive_log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Hidden pre-activations and logits, with explicit loops over the weight
/// layout `[fan_out, fan_in]`.
pub fn naive_forward(params: &ModelParams, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = params.tensors();
    let layers = t.len() / 2;
    let mut h = x.to_vec();
    let mut pre = Vec::new();
    for l in 0..layers {
        let w = &t[2 * l];
        let b = &t[2 * l + 1];
        let (out, inp) = (w.shape[0], w.shape[1]);
        let z: Vec<f64> = (0..out)
            .map(|o| b.values[o] + (0..inp).map(|i| w.values[o * inp + i] * h[i]).sum::<f64>())
            .collect();
        if l + 1 == layers {
            return (pre, z);
        }
        pre.push(z.clone());
        h = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    unreachable!()
}

pub fn naive_logits(params: &ModelParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter().map(|x| naive_forward(params, x).1).collect()
}

/// Smallest |pre-activation| over the batch; near-zero values sit on the
/// ReLU kink where finite differences are meaningless.
pub fn kink_distance(params: &ModelParams, xs: &[Vec<f64>]) -> f64 {
    xs.iter()
        .flat_map(|x| naive_forward(params, x).0.into_iter().flatten())
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

pub fn oracle_ce_adjusted(logits: &[Vec<f64>], prior: &[f64], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let adj: Vec<f64> = z.iter().zip(prior).map(|(v, p)| v + p.max(1e-8).ln()).collect();
            -naive_log_softmax(&adj)[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn oracle_lc(logits: &[Vec<f64>], beliefs: &[Vec<f64>]) -> f64 {
    logits
        .iter()
        .zip(beliefs)
        .map(|(z, b)| {
            let y = naive_softmax(b);
            let lp = naive_log_softmax(z);
            -y.iter().zip(&lp).map(|(a, l)| a * l).sum::<f64>()
        })
        .sum::<f64>()
        / logits.len() as f64
}

pub fn oracle_comp(beliefs: &[Vec<f64>], labels: &[usize]) -> f64 {
    beliefs
        .iter()
        .zip(labels)
        .map(|(b, &y)| -naive_log_softmax(b)[y])
        .sum::<f64>()
        / labels.len() as f64
}

pub fn oracle_masked_entropy(logits: &[Vec<f64>], mask: &[bool]) -> f64 {
    let kept = mask.iter().filter(|m| **m).count();
    let total: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(z, _)| {
            let lp = naive_log_softmax(z);
            -lp.iter().map(|l| l.exp() * l).sum::<f64>()
        })
        .sum();
    total / kept.max(1) as f64
}

pub fn oracle_triplet(
    logits: &[Vec<f64>],
    beliefs: &[Vec<f64>],
    labels: &[usize],
    mask: &[bool],
    alpha: f64,
    beta: f64,
) -> f64 {
    oracle_lc(logits, beliefs)
        + alpha * oracle_comp(beliefs, labels)
        + beta * oracle_masked_entropy(logits, mask)
}

// ---------- finite differences ----------

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Rebuild parameters from a flat vector with the layout of `like`.
pub fn unflatten(like: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut p = like.clone();
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.values.len();
        t.values.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    p
}

/// A random network and batch away from ReLU kinks.
pub struct Instance {
    pub params: ModelParams,
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub beliefs: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn features(&self) -> Matrix {
        Matrix::from_rows(&self.xs).unwrap()
    }

    pub fn belief_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.beliefs).unwrap()
    }
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    loop {
        let dim = r.random_range(2..6);
        let hidden = r.random_range(2..7);
        let c = r.random_range(2..6);
        let b = r.random_range(1..7);
        let params = ModelParams::init(&Architecture::new(dim, vec![hidden], c), r.random());
        // non-zero biases so the bias gradient is exercised
        let mut params = params;
        for t in params.tensors_mut() {
            if t.name.ends_with("bias") {
                t.values = normal_vec(&mut r, t.values.len()).iter().map(|v| 0.3 * v).collect();
            }
        }
        let xs: Vec<Vec<f64>> = (0..b).map(|_| normal_vec(&mut r, dim)).collect();
        if kink_distance(&params, &xs) < 1e-2 {
            continue;
        }
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let beliefs: Vec<Vec<f64>> = (0..b).map(|_| normal_vec(&mut r, c).iter().map(|v| 2.0 * v).collect()).collect();
        let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let prior = raw.iter().map(|v| v / s).collect();
        let mask = (0..b).map(|_| r.random_bool(0.7)).collect();
        return Instance {
            params,
            xs,
            labels,
            beliefs,
            prior,
            mask,
        };
    }
}

pub fn flat_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn rows_of(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Worst relative error of each analytic gradient of one instance:
/// (L_cls params, L_c params, L_c beliefs, L_comp beliefs, L_e params,
/// triplet params, triplet beliefs).
pub fn gradient_errors(inst: &Instance, alpha: f64, beta: f64) -> [f64; 7] {
    let x = inst.features();
    let p0 = inst.params.flatten();
    let c = inst.prior.len();
    let yb = inst.belief_matrix();
    let b0 = flat_rows(&inst.beliefs);
    let trace = nn::forward_trace(&inst.params, &x).unwrap();
    let param_grad = |upstream: &Matrix| nn::backward_trace(&inst.params, &trace, upstream).unwrap().flatten();
    let with_params = |flat: &[f64]| naive_logits(&unflatten(&inst.params, flat), &inst.xs);
    let logits0 = naive_logits(&inst.params, &inst.xs);

    let cls = nn::ce_logit_adjusted(trace.logits(), &inst.prior, &inst.labels).unwrap();
    let e_cls = relative_error(
        &param_grad(&cls.grad),
        &numeric_gradient(|f| oracle_ce_adjusted(&with_params(f), &inst.prior, &inst.labels), &p0, FD_STEP),
    );

    let lc = correction::classification_loss(trace.logits(), &yb).unwrap();
    let e_lc_p = relative_error(
        &param_grad(lc.grad_logits.as_ref().unwrap()),
        &numeric_gradient(|f| oracle_lc(&with_params(f), &inst.beliefs), &p0, FD_STEP),
    );
    let e_lc_y = relative_error(
        lc.grad_beliefs.as_ref().unwrap().as_slice(),
        &numeric_gradient(|f| oracle_lc(&logits0, &rows_of(f, c)), &b0, FD_STEP),
    );

    // compatibility gradient is reported per sample; the batch mean scales by 1/B
    let bsz = inst.labels.len() as f64;
    let comp_grad: Vec<f64> = inst
        .beliefs
        .iter()
        .zip(&inst.labels)
        .flat_map(|(b, &y)| {
            correction::compatibility_loss(y, &LabelBelief { logits: b.clone() })
                .unwrap()
                .1
                .into_iter()
                .map(move |g| g / bsz)
        })
        .collect();
    let e_comp = relative_error(
        &comp_grad,
        &numeric_gradient(|f| oracle_comp(&rows_of(f, c), &inst.labels), &b0, FD_STEP),
    );

    let le = correction::masked_entropy(trace.logits(), &inst.mask).unwrap();
    let e_le = relative_error(
        &param_grad(le.grad_logits.as_ref().unwrap()),
        &numeric_gradient(|f| oracle_masked_entropy(&with_params(f), &inst.mask), &p0, FD_STEP),
    );

    let t = correction::triplet_loss(trace.logits(), &yb, &inst.labels, &inst.mask, alpha, beta).unwrap();
    let e_t_p = relative_error(
        &param_grad(&t.grad_logits),
        &numeric_gradient(
            |f| oracle_triplet(&with_params(f), &inst.beliefs, &inst.labels, &inst.mask, alpha, beta),
            &p0,
            FD_STEP,
        ),
    );
    let e_t_y = relative_error(
        t.grad_beliefs.as_slice(),
        &numeric_gradient(
            |f| oracle_triplet(&logits0, &rows_of(f, c), &inst.labels, &inst.mask, alpha, beta),
            &b0,
            FD_STEP,
        ),
    );
    [e_cls, e_lc_p, e_lc_y, e_comp, e_le, e_t_p, e_t_y]
}

pub const GRADIENT_NAMES: [&str; 7] = [
    "logit-adjusted CE / params",
    "L_c / params",
    "L_c / beliefs",
    "L_comp / beliefs",
    "masked entropy / params",
    "triplet / params",
    "triplet / beliefs",
];

// ---------- geometric median ----------

/// Brute-force minimiser set of `sum |x - x_i|` on a grid over the data
/// range widened by 1; returns the lowest and highest grid points attaining
/// the minimum (up to rounding).
pub fn grid_median_interval(points: &[f64], step: f64) -> (f64, f64) {
    let lo = points.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let n = ((hi - lo) / step).ceil() as usize;
    let cost = |x: f64| points.iter().map(|p| (x - p).abs()).sum::<f64>();
    let mut best = f64::INFINITY;
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let x = lo + i as f64 * step;
        let v = cost(x);
        best = best.min(v);
        values.push((x, v));
    }
    let tol = 1e-9 * (1.0 + best);
    let winners: Vec<f64> = values.iter().filter(|(_, v)| *v <= best + tol).map(|(x, _)| *x).collect();
    (winners[0], *winners.last().unwrap())
}

/// Distance of the Weiszfeld estimate from the brute-force minimiser set.
pub fn weiszfeld_error(points: &[f64], opts: GeometricMedianOptions) -> f64 {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| vec![*p]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let est = aggregation::weiszfeld(&refs, opts)[0];
    let (lo, hi) = grid_median_interval(points, 1e-4);
    if est < lo {
        lo - est
    } else if est > hi {
        est - hi
    } else {
        0.0
    }
}

// ---------- invariant checks (shared by proptest and the harness) ----------

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn blob_shard(n: usize, c: usize, seed: u64) -> ClientShard {
    let d = dataset::generate_blobs(n.max(c), c, 3, 2.0, seed).unwrap();
    ClientShard::new(0, d.samples, c)
}

/// Noise injection keeps features and true labels, and changes no sample
/// count.
pub fn check_noise_conservation(n: usize, c: usize, rate: f64, asym: bool, seed: u64) -> Check {
    let shard = blob_shard(n, c, seed);
    let kind = if asym { NoiseKind::Asymmetric } else { NoiseKind::Symmetric };
    let noisy = dataset::apply_noise(&shard, kind, rate, seed ^ 0x55).map_err(|e| e.to_string())?;
    ensure(noisy.len() == shard.len(), || "sample count changed".into())?;
    for (a, b) in shard.samples.iter().zip(&noisy.samples) {
        ensure(a.features == b.features && a.true_label == b.true_label, || {
            "features or true label changed".into()
        })?;
        ensure(b.observed_label < c, || "observed label out of range".into())?;
    }
    let prior_sum: f64 = noisy.class_prior.iter().sum();
    ensure((prior_sum - 1.0).abs() < 1e-12, || format!("prior sums to {prior_sum}"))
}

/// Realised flip fraction within 5 binomial standard deviations of `rate`.
pub fn check_flip_concentration(rate: f64, seed: u64) -> Check {
    let n = 4000;
    let shard = blob_shard(n, 4, seed);
    let noisy = dataset::apply_noise(&shard, NoiseKind::Symmetric, rate, seed).map_err(|e| e.to_string())?;
    let sd = (rate * (1.0 - rate) / n as f64).sqrt();
    ensure((noisy.realized_flip_rate - rate).abs() <= 5.0 * sd + 1e-12, || {
        format!("rate {rate}: realised {}", noisy.realized_flip_rate)
    })
}

/// Softmax rows and logit-adjusted probabilities are distributions.
pub fn check_normalization(logits: &[f64], prior: &[f64]) -> Check {
    let p = nn::softmax(logits);
    let s: f64 = p.iter().sum();
    ensure((s - 1.0).abs() < 1e-12 && p.iter().all(|v| (0.0..=1.0).contains(v)), || {
        format!("softmax sums to {s}")
    })?;
    let adj: Vec<f64> = logits.iter().zip(prior).map(|(z, q)| z + q.max(1e-8).ln()).collect();
    let pa = nn::softmax(&adj);
    let sa: f64 = pa.iter().sum();
    ensure((sa - 1.0).abs() < 1e-12, || format!("adjusted softmax sums to {sa}"))?;
    let sp: f64 = prior.iter().sum();
    ensure((sp - 1.0).abs() < 1e-12, || format!("prior sums to {sp}"))
}

pub fn check_class_prior(labels: &[usize], c: usize) -> Check {
    let samples: Vec<Sample> = labels
        .iter()
        .map(|&y| Sample {
            features: vec![0.0],
            observed_label: y,
            true_label: y,
        })
        .collect();
    let pi = dataset::class_prior(&samples, c);
    let s: f64 = pi.iter().sum();
    ensure((s - 1.0).abs() < 1e-12, || format!("class prior sums to {s}"))
}

pub fn check_mask_cardinality(losses: &[f64], tau: f64) -> Check {
    let m = correction::valid_mask(losses, tau);
    let expected = ((tau * losses.len() as f64) / 100.0).ceil() as usize;
    let kept = m.iter().filter(|v| **v).count();
    ensure(m.len() == losses.len() && kept == expected.min(losses.len()), || {
        format!("tau {tau}, batch {}: kept {kept}, expected {expected}", losses.len())
    })?;
    // every kept loss is <= every dropped loss
    let max_kept = losses.iter().zip(&m).filter(|(_, k)| **k).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let min_drop = losses.iter().zip(&m).filter(|(_, k)| !**k).map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
    ensure(max_kept <= min_drop, || "a dropped loss is smaller than a kept one".into())
}

pub fn random_loss_matrix(r: &mut ChaCha8Rng, n: usize, c: usize) -> LossMatrix {
    let split = r.random_range(1..n);
    let rows: Vec<(usize, Vec<Option<f64>>)> = (0..n)
        .map(|k| {
            let base = if k < split { 0.3 } else { 1.5 };
            (k, (0..c).map(|_| Some(base + 0.4 * r.random::<f64>())).collect())
        })
        .collect();
    detection::assemble_loss_matrix(&rows).unwrap()
}

/// EM never decreases the log-likelihood (up to rounding).
pub fn check_em_monotone(m: &LossMatrix) -> Check {
    let gmm = detection::fit_gmm2(m, 100, 1e-6).map_err(|e| e.to_string())?;
    for w in gmm.log_likelihood_trace.windows(2) {
        ensure(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), || {
            format!("log-likelihood fell from {} to {}", w[0], w[1])
        })?;
    }
    Ok(())
}

pub fn check_partition_cover(m: &LossMatrix) -> Check {
    let gmm = detection::fit_gmm2(m, 100, 1e-6).map_err(|e| e.to_string())?;
    let p = detection::partition_clients(&gmm, m);
    ensure(p.clean_ids.is_disjoint(&p.noisy_ids), || "groups overlap".into())?;
    let mut all: Vec<usize> = p.clean_ids.union(&p.noisy_ids).copied().collect();
    all.sort_unstable();
    ensure(all == m.client_ids, || "groups do not cover every client".into())
}

pub fn scalar_models(values: &[Vec<f64>]) -> Vec<ModelParams> {
    let dim = values[0].len();
    let arch = Architecture::new(dim, vec![], 1);
    values
        .iter()
        .map(|v| {
            let mut m = ModelParams::zeros(&arch);
            m.tensors_mut()[0].values.copy_from_slice(v);
            m
        })
        .collect()
}

fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every aggregator is invariant to model order, stays inside the per-
/// coordinate range of its inputs, and commutes with translation.
pub fn check_aggregation_invariants(points: &[Vec<f64>], shift: &[f64], weights: &[f64]) -> Check {
    let models = scalar_models(points);
    let mut rev = models.clone();
    rev.reverse();
    let rev_w: Vec<f64> = weights.iter().rev().copied().collect();
    let shifted: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(shift).map(|(a, s)| a + s).collect())
        .collect();
    let shifted = scalar_models(&shifted);
    let gm = GeometricMedianOptions::default();
    for method in aggregation::AggregationMethod::ALL {
        let a = aggregation::aggregate(method, &models, weights, gm).map_err(|e| e.to_string())?;
        let b = aggregation::aggregate(method, &rev, &rev_w, gm).map_err(|e| e.to_string())?;
        ensure(max_abs_diff(&a, &b) < 1e-9, || format!("{method}: order changed the result"))?;
        let flat = a.flatten();
        for (j, v) in flat.iter().enumerate().take(points[0].len()) {
            let lo = points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
            ensure(*v >= lo - 1e-9 && *v <= hi + 1e-9, || {
                format!("{method}: coordinate {j} = {v} outside [{lo}, {hi}]")
            })?;
        }
        let s = aggregation::aggregate(method, &shifted, weights, gm).map_err(|e| e.to_string())?;
        let moved: Vec<f64> = flat.iter().zip(shift.iter().chain(std::iter::repeat(&0.0))).map(|(v, d)| v + d).collect();
        let err = s.flatten().iter().zip(&moved).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(err < 1e-7, || format!("{method}: translation error {err}"))?;
    }
    Ok(())
}

/// The Weiszfeld estimate lies in the convex hull of the points: along
/// every probed direction its projection is within the projections' range.
pub fn check_gm_in_hull(points: &[Vec<f64>], seed: u64) -> Check {
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let m = aggregation::weiszfeld(&refs, GeometricMedianOptions::default());
    let mut r = rng(seed);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..64 {
        let u = normal_vec(&mut r, m.len());
        let proj: Vec<f64> = refs.iter().map(|p| dot(p, &u)).collect();
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = dot(&m, &u);
        ensure(v >= lo - 1e-9 && v <= hi + 1e-9, || {
            format!("projection {v} outside [{lo}, {hi}]")
        })?;
    }
    Ok(())
}

/// Estimated labels do not depend on whether argmax is taken before or
/// after the softmax, nor on a constant shift of the logits.
pub fn check_argmax_invariance(logits: &[f64], shift: f64) -> Check {
    let b = LabelBelief { logits: logits.to_vec() };
    let direct = correction::argmax(logits);
    let via_softmax = correction::argmax(&b.soft_label());
    let shifted = LabelBelief {
        logits: logits.iter().map(|v| v + shift).collect(),
    };
    ensure(b.estimated_label() == direct && via_softmax == direct, || {
        format!("argmax mismatch on {logits:?}")
    })?;
    ensure(shifted.estimated_label() == direct, || "shift changed the estimate".into())
}
