//! Synthetic data, Dirichlet client partitioning and label-noise injection.
//!
//! Ground-truth labels are kept on every [`Sample`] next to the observed
//! label. Training code only ever reads `observed_label`; `true_label` exists
//! for evaluating detection and label correction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of times a Dirichlet partition is redrawn before giving up.
pub const PARTITION_RETRIES: usize = 100;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub observed_label: usize,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts by true label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.true_label] += 1;
        }
        counts
    }

    /// Export as CSV with columns `f0..f{d-1}, observed_label, true_label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("f{i}")).collect();
        header.push("observed_label".into());
        header.push("true_label".into());
        wtr.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            row.push(s.observed_label.to_string());
            row.push(s.true_label.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Import a CSV written by [`LabeledDataset::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let ncols = header.len();
        if ncols < 3
            || &header[ncols - 2] != "observed_label"
            || &header[ncols - 1] != "true_label"
        {
            return Err(Error::Parse(
                "dataset CSV must end with observed_label,true_label columns".into(),
            ));
        }
        let input_dim = ncols - 2;
        for (i, name) in header.iter().take(input_dim).enumerate() {
            if name != format!("f{i}") {
                return Err(Error::Parse(format!("expected column f{i}, found {name}")));
            }
        }
        let mut samples = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let parse_f = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {line}: {e}")))
            };
            let parse_l = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("row {line}: {e}")))
            };
            let features = record
                .iter()
                .take(input_dim)
                .map(parse_f)
                .collect::<Result<Vec<_>>>()?;
            if features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("row {line}: non-finite feature")));
            }
            let observed_label = parse_l(&record[input_dim])?;
            let true_label = parse_l(&record[input_dim + 1])?;
            for label in [observed_label, true_label] {
                if label >= num_classes {
                    return Err(Error::Index { label, num_classes });
                }
            }
            samples.push(Sample {
                features,
                observed_label,
                true_label,
            });
        }
        Ok(Self {
            samples,
            num_classes,
            input_dim,
        })
    }
}

/// Label-noise family applied to one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        })
    }
}

/// Federation-wide noise scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScenario {
    Symmetric,
    Asymmetric,
    /// Even client indices symmetric, odd asymmetric.
    Mixed,
}

impl fmt::Display for NoiseScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseScenario::Symmetric => "symmetric",
            NoiseScenario::Asymmetric => "asymmetric",
            NoiseScenario::Mixed => "mixed",
        })
    }
}

impl FromStr for NoiseScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "asymmetric" => Ok(Self::Asymmetric),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseScenario,
    pub max_rate: f64,
}

impl NoiseSpec {
    /// Per-client `(kind, rate)` following the linear schedule. Clients with a
    /// zero rate are reported as [`NoiseKind::None`].
    pub fn assign(&self, num_clients: usize) -> Result<Vec<(NoiseKind, f64)>> {
        let rates = noise_rate_schedule(self.max_rate, num_clients)?;
        let kinds = match self.kind {
            NoiseScenario::Symmetric => vec![NoiseKind::Symmetric; num_clients],
            NoiseScenario::Asymmetric => vec![NoiseKind::Asymmetric; num_clients],
            NoiseScenario::Mixed => make_mixed_assignment(num_clients)?,
        };
        Ok(kinds
            .into_iter()
            .zip(rates)
            .map(|(k, r)| if r == 0.0 { (NoiseKind::None, r) } else { (k, r) })
            .collect())
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// Empirical distribution of observed labels.
    pub class_prior: Vec<f64>,
    pub injected_noise_rate: f64,
    pub noise_kind: NoiseKind,
    /// Fraction of samples whose observed label differs from the true label.
    pub realized_flip_rate: f64,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<Sample>, num_classes: usize) -> Self {
        let class_prior = class_prior(&samples, num_classes);
        let realized_flip_rate = flip_fraction(&samples);
        Self {
            client_id,
            samples,
            num_classes,
            class_prior,
            injected_noise_rate: 0.0,
            noise_kind: NoiseKind::None,
            realized_flip_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Empirical class distribution of observed labels.
pub fn class_prior(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        counts[s.observed_label] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn flip_fraction(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let flipped = samples
        .iter()
        .filter(|s| s.observed_label != s.true_label)
        .count();
    flipped as f64 / samples.len() as f64
}

/// Unit direction for the mean of class `class`: the coordinate axes first,
/// then their negatives, then seeded random directions.
fn cluster_direction(class: usize, num_classes: usize, dim: usize) -> Vec<f64> {
    let mut dir = vec![0.0; dim];
    if class < dim {
        dir[class] = 1.0;
    } else if class < 2 * dim {
        dir[class - dim] = -1.0;
    } else {
        let mut r = rng::stream(0xB10B, &[num_classes as u64, dim as u64, class as u64]);
        loop {
            for v in dir.iter_mut() {
                *v = r.sample(StandardNormal);
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    dir
}

/// Gaussian blobs: class `c` is an isotropic unit-variance Gaussian centred at
/// `separation` times a class-specific unit direction. Sample `i` has class
/// `i mod C`, so classes are balanced within one sample.
pub fn generate_blobs(
    num_samples: usize,
    num_classes: usize,
    input_dim: usize,
    separation: f64,
    rng_seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if num_samples < num_classes {
        return Err(Error::Config(format!(
            "num_samples ({num_samples}) must be >= num_classes ({num_classes})"
        )));
    }
    if input_dim < 2 {
        return Err(Error::Config(format!(
            "input_dim must be >= 2, got {input_dim}"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            cluster_direction(c, num_classes, input_dim)
                .into_iter()
                .map(|v| v * separation)
                .collect()
        })
        .collect();
    let mut r = rng::from_seed(rng_seed);
    let samples = (0..num_samples)
        .map(|i| {
            let label = i % num_classes;
            let features = means[label]
                .iter()
                .map(|m| m + r.sample::<f64, _>(StandardNormal))
                .collect();
            Sample {
                features,
                observed_label: label,
                true_label: label,
            }
        })
        .collect();
    Ok(LabeledDataset {
        samples,
        num_classes,
        input_dim,
    })
}

fn sample_dirichlet<R: Rng>(r: &mut R, concentration: f64, n: usize) -> Option<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).ok()?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    Some(draws.into_iter().map(|d| d / total).collect())
}

/// Label-skewed split: for every class, the fraction of that class given to
/// each client is drawn from a symmetric Dirichlet(`gamma`). The whole
/// partition is redrawn until every client holds at least `min_per_client`
/// samples.
pub fn partition_dirichlet(
    dataset: &LabeledDataset,
    num_clients: usize,
    gamma: f64,
    min_per_client: usize,
    rng_seed: u64,
) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let c = dataset.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.observed_label].push(i);
    }
    let mut r = rng::from_seed(rng_seed);
    for _ in 0..PARTITION_RETRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        let mut ok = true;
        for members in &by_class {
            let mut idx = members.clone();
            idx.shuffle(&mut r);
            let Some(props) = sample_dirichlet(&mut r, gamma, num_clients) else {
                ok = false;
                break;
            };
            let n = idx.len();
            let mut start = 0usize;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == num_clients {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                assigned[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if !ok || assigned.iter().any(|a| a.len() < min_per_client.max(1)) {
            continue;
        }
        return Ok(assigned
            .into_iter()
            .enumerate()
            .map(|(k, ids)| {
                let samples = ids.iter().map(|&i| dataset.samples[i].clone()).collect();
                ClientShard::new(k, samples, c)
            })
            .collect());
    }
    Err(Error::Partition(format!(
        "could not give every one of {num_clients} clients >= {min_per_client} samples \
         after {PARTITION_RETRIES} draws (gamma = {gamma})"
    )))
}

/// Linearly increasing per-client noise rates, `0` for the first client and
/// `max_rate` for the last.
pub fn noise_rate_schedule(max_rate: f64, num_clients: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&max_rate) {
        return Err(Error::Config(format!(
            "max noise rate must lie in [0, 1], got {max_rate}"
        )));
    }
    if num_clients < 2 {
        return Err(Error::Config(format!(
            "noise schedule needs >= 2 clients, got {num_clients}"
        )));
    }
    let last = (num_clients - 1) as f64;
    Ok((0..num_clients)
        .map(|k| max_rate * (k as f64 / last))
        .collect())
}

/// Row-stochastic label transition matrix; entry `(i, j)` is the probability
/// that true class `i` is observed as class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn identity(num_classes: usize) -> Self {
        let rows = (0..num_classes)
            .map(|i| (0..num_classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { rows }
    }

    /// Wrap explicit rows, checking they form a square row-stochastic matrix.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!(
                    "transition row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config(format!(
                    "transition row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Config(format!(
                    "transition row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    fn sample_row<R: Rng>(&self, class: usize, r: &mut R) -> usize {
        let row = &self.rows[class];
        let u: f64 = r.random();
        let mut cum = 0.0;
        for (j, p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                return j;
            }
        }
        // Rounding left u above the cumulative sum: take the last class with mass.
        row.iter().rposition(|p| *p > 0.0).unwrap_or(class)
    }
}

pub fn build_transition_matrix(
    kind: NoiseKind,
    rate: f64,
    num_classes: usize,
) -> Result<TransitionMatrix> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "noise rate must lie in [0, 1], got {rate}"
        )));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "transition matrix needs >= 2 classes, got {num_classes}"
        )));
    }
    let c = num_classes;
    let rows = match kind {
        NoiseKind::None => return Ok(TransitionMatrix::identity(c)),
        NoiseKind::Symmetric => {
            let off = rate / (c - 1) as f64;
            (0..c)
                .map(|i| (0..c).map(|j| if i == j { 1.0 - rate } else { off }).collect())
                .collect()
        }
        NoiseKind::Asymmetric => (0..c)
            .map(|i| {
                let mut row = vec![0.0; c];
                row[i] = 1.0 - rate;
                row[(i + 1) % c] += rate;
                row
            })
            .collect(),
    };
    Ok(TransitionMatrix { rows })
}

/// Redraw every observed label from the transition row of its true label.
/// True labels are left untouched and the prior is recomputed.
pub fn inject_noise(
    shard: &ClientShard,
    transition: &TransitionMatrix,
    rng_seed: u64,
) -> Result<ClientShard> {
    let transition = TransitionMatrix::from_rows(transition.rows.clone())?;
    if transition.num_classes() != shard.num_classes {
        return Err(Error::Config(format!(
            "transition matrix is {0}x{0} but shard has {1} classes",
            transition.num_classes(),
            shard.num_classes
        )));
    }
    let mut r = rng::from_seed(rng_seed);
    let samples: Vec<Sample> = shard
        .samples
        .iter()
        .map(|s| Sample {
            features: s.features.clone(),
            observed_label: transition.sample_row(s.true_label, &mut r),
            true_label: s.true_label,
        })
        .collect();
    let mut out = ClientShard::new(shard.client_id, samples, shard.num_classes);
    out.injected_noise_rate = shard.injected_noise_rate;
    out.noise_kind = shard.noise_kind;
    Ok(out)
}

/// Build the transition for `(kind, rate)`, inject it and record both on the
/// returned shard.
pub fn apply_noise(
    shard: &ClientShard,
    kind: NoiseKind,
    rate: f64,
    rng_seed: u64,
) -> Result<ClientShard> {
    let transition = build_transition_matrix(kind, rate, shard.num_classes)?;
    let mut out = inject_noise(shard, &transition, rng_seed)?;
    out.injected_noise_rate = if kind == NoiseKind::None { 0.0 } else { rate };
    out.noise_kind = kind;
    Ok(out)
}

/// Mixed scenario: even indices symmetric, odd asymmetric.
pub fn make_mixed_assignment(num_clients: usize) -> Result<Vec<NoiseKind>> {
    if num_clients < 2 {
        return Err(Error::Config(format!(
            "mixed assignment needs >= 2 clients, got {num_clients}"
        )));
    }
    Ok((0..num_clients)
        .map(|k| {
            if k % 2 == 0 {
                NoiseKind::Symmetric
            } else {
                NoiseKind::Asymmetric
            }
        })
        .collect())
}
