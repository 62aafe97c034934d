//! Two-stage federated training: warm-up, noisy-client detection, then
//! masked label correction on detected clients, with robust aggregation
//! every round.

pub mod config;
pub mod local;
pub mod metrics;
pub mod report;

use std::time::Instant;

use rayon::prelude::*;

pub use config::*;
pub use local::{local_update_clean, local_update_noisy, select_clients, LocalOutcome};
pub use metrics::{
    correction_accuracy, evaluate, scores_from_predictions, CorrectionAccuracy, EvalMetrics,
    RoundMetrics, Stage,
};
pub use report::{best_round, CorrectionRow, DetectionReport, DetectionRow, ExperimentReport};

use crate::aggregation::aggregate;
use crate::correction::BeliefStore;
use crate::dataset::{
    apply_noise, generate_blobs, partition_dirichlet, ClientShard, LabeledDataset,
};
use crate::detection::{self, ClientPartition};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::rng::{derive_seed, tag};

/// Execution settings that do not affect results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads for client updates; 0 picks the number of cores.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Clean,
    Noisy,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub shard: ClientShard,
    /// Set by detection.
    pub group: Option<Group>,
}

/// Load or synthesise the train and test sets.
pub fn build_datasets(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &config.data;
    let load = |csv: &Option<std::path::PathBuf>, n: usize, t: u64| match csv {
        Some(path) => {
            let ds = LabeledDataset::read_csv(path, d.num_classes)?;
            if ds.input_dim != d.input_dim {
                return Err(Error::Config(format!(
                    "data.input_dim: {} has {} features, config says {}",
                    path.display(),
                    ds.input_dim,
                    d.input_dim
                )));
            }
            Ok(ds)
        }
        None => generate_blobs(
            n,
            d.num_classes,
            d.input_dim,
            d.separation,
            derive_seed(config.seed, &[t]),
        ),
    };
    Ok((
        load(&d.train_csv, d.train_samples, tag::TRAIN_DATA)?,
        load(&d.test_csv, d.test_samples, tag::TEST_DATA)?,
    ))
}

/// Partition the training set and inject each client's scheduled noise.
pub fn build_clients(config: &ExperimentConfig, train: &LabeledDataset) -> Result<Vec<ClientShard>> {
    let n = config.partition.clients;
    let shards = partition_dirichlet(
        train,
        n,
        config.partition.gamma,
        config.partition.min_per_client,
        derive_seed(config.seed, &[tag::PARTITION]),
    )?;
    let assignment = config.noise.spec().assign(n)?;
    shards
        .iter()
        .zip(assignment)
        .map(|(s, (kind, rate))| {
            apply_noise(
                s,
                kind,
                rate,
                derive_seed(config.seed, &[tag::NOISE, s.client_id as u64]),
            )
        })
        .collect()
}

/// Server-side state of a simulated federation.
pub struct Federation {
    config: ExperimentConfig,
    clients: Vec<ClientState>,
    test: LabeledDataset,
    beliefs: BeliefStore,
    partition: Option<ClientPartition>,
    pool: rayon::ThreadPool,
}

impl Federation {
    /// Validate the config and build data, shards and noise.
    pub fn new(config: &ExperimentConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let (train, test) = build_datasets(config)?;
        let shards = build_clients(config, &train)?;
        Self::from_parts(config, shards, test, options)
    }

    /// Federation over prepared shards; shard `k` must carry client id `k`.
    pub fn from_parts(
        config: &ExperimentConfig,
        shards: Vec<ClientShard>,
        test: LabeledDataset,
        options: RunOptions,
    ) -> Result<Self> {
        if shards.len() != config.partition.clients {
            return Err(Error::Config(format!(
                "partition.clients: config says {}, got {} shards",
                config.partition.clients,
                shards.len()
            )));
        }
        if let Some((k, s)) = shards.iter().enumerate().find(|(k, s)| s.client_id != *k) {
            return Err(Error::Config(format!(
                "shard at position {k} carries client id {}",
                s.client_id
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            beliefs: BeliefStore::new(config.correction.persist_beliefs),
            config: config.clone(),
            clients: shards
                .into_iter()
                .map(|shard| ClientState { shard, group: None })
                .collect(),
            test,
            partition: None,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn beliefs(&self) -> &BeliefStore {
        &self.beliefs
    }

    pub fn partition(&self) -> Option<&ClientPartition> {
        self.partition.as_ref()
    }

    pub fn initial_model(&self) -> ModelParams {
        ModelParams::init(
            &self.config.architecture(),
            derive_seed(self.config.seed, &[tag::MODEL_INIT]),
        )
    }

    fn takes_noisy_path(&self, round: usize, client: usize) -> bool {
        round >= self.config.train.warmup_rounds
            && self.clients[client].group == Some(Group::Noisy)
    }

    /// One communication round: local updates on the selected clients,
    /// aggregation and evaluation of the new global model.
    pub fn run_round(
        &mut self,
        round: usize,
        global: &ModelParams,
    ) -> Result<(ModelParams, RoundMetrics)> {
        let start = Instant::now();
        let selected = select_clients(round, &self.config);
        let c = self.config.data.num_classes;

        let noisy: Vec<bool> = selected
            .iter()
            .map(|&k| self.takes_noisy_path(round, k))
            .collect();
        let mut jobs = Vec::with_capacity(selected.len());
        for (&k, noisy) in selected.iter().zip(noisy) {
            let beliefs = noisy.then(|| {
                let labels: Vec<usize> = self.clients[k]
                    .shard
                    .samples
                    .iter()
                    .map(|s| s.observed_label)
                    .collect();
                self.beliefs.checkout(k, &labels, c, self.config.correction.k)
            });
            jobs.push((k, beliefs));
        }

        let cfg = &self.config;
        let clients = &self.clients;
        let results: Vec<Result<(usize, LocalOutcome, Option<Vec<_>>)>> = self.pool.install(|| {
            jobs.into_par_iter()
                .map(|(k, beliefs)| {
                    let shard = &clients[k].shard;
                    let mut r = local::client_stream(cfg, k, round);
                    match beliefs {
                        Some(mut b) => {
                            let out = local_update_noisy(global, shard, &mut b, cfg, &mut r)?;
                            Ok((k, out, Some(b)))
                        }
                        None => Ok((k, local_update_clean(global, shard, cfg, &mut r)?, None)),
                    }
                })
                .collect()
        });

        let mut models = Vec::with_capacity(results.len());
        let mut weights = Vec::with_capacity(results.len());
        let mut loss_sum = 0.0;
        let mut noisy_selected = 0;
        for res in results {
            let (k, out, beliefs) = res?;
            if let Some(b) = beliefs {
                self.beliefs.insert(k, b);
                noisy_selected += 1;
            }
            loss_sum += out.mean_loss;
            weights.push(out.num_samples as f64);
            models.push(out.params);
        }
        let cfg = &self.config;
        let next = aggregate(cfg.aggregation.method, &models, &weights, cfg.aggregation.gm_options())?;
        if !next.is_finite() {
            return Err(Error::Numeric("aggregated model is not finite".into()));
        }
        let eval = evaluate(&next, &self.test)?;
        let ca = if round >= cfg.train.warmup_rounds {
            self.correction_accuracy()
        } else {
            None
        };
        let metrics = RoundMetrics {
            round,
            stage: if round < cfg.train.warmup_rounds {
                Stage::Warmup
            } else {
                Stage::Correction
            },
            clean_selected: selected.len() - noisy_selected,
            noisy_selected,
            selected,
            macro_precision: eval.macro_precision,
            macro_recall: eval.macro_recall,
            macro_f1: eval.macro_f1,
            accuracy: eval.accuracy,
            mean_train_loss: loss_sum / models.len() as f64,
            correction_accuracy: ca.map(|a| a.estimated),
            observed_label_accuracy: ca.map(|a| a.observed),
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        Ok((next, metrics))
    }

    /// Split every client into clean or noisy using the per-class losses of
    /// `global`, and record the groups.
    pub fn run_detection(&mut self, global: &ModelParams) -> Result<DetectionReport> {
        let clients = &self.clients;
        let losses: Vec<Result<(usize, Vec<Option<f64>>)>> = self.pool.install(|| {
            clients
                .par_iter()
                .map(|s| Ok((s.shard.client_id, detection::per_class_losses(global, &s.shard)?)))
                .collect()
        });
        let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
        let matrix = detection::assemble_loss_matrix(&losses)?;
        let ids = matrix.client_ids.clone();
        let dc = &self.config.detection;

        let mut fell_back = false;
        let (partition, resp) = match dc.mode {
            DetectionMode::AllClean => (ClientPartition::all_clean(ids), None),
            DetectionMode::AllNoisy => (ClientPartition::all_noisy(ids), None),
            DetectionMode::Gmm => match detection::fit_gmm2(&matrix, dc.max_iters, dc.tol) {
                Ok(gmm) => (
                    detection::partition_clients(&gmm, &matrix),
                    Some(detection::noisy_responsibilities(&gmm, &matrix)),
                ),
                Err(e) => {
                    log::warn!("noisy-client detection failed ({e}); treating every client as clean");
                    fell_back = true;
                    (ClientPartition::all_clean(ids), None)
                }
            },
        };

        for s in &mut self.clients {
            s.group = Some(if partition.is_noisy(s.shard.client_id) {
                Group::Noisy
            } else {
                Group::Clean
            });
        }
        let rows = matrix
            .row_sums()
            .into_iter()
            .enumerate()
            .map(|(i, row_sum)| {
                let id = matrix.client_ids[i];
                DetectionRow {
                    client_id: id,
                    row_sum,
                    responsibility_noisy: resp.as_ref().map(|r| r[i]),
                    assigned_group: if partition.is_noisy(id) { "noisy" } else { "clean" },
                    true_injected_rate: self.clients[id].shard.injected_noise_rate,
                }
            })
            .collect();
        self.partition = Some(partition.clone());
        Ok(DetectionReport {
            partition,
            rows,
            fell_back,
        })
    }

    /// Estimated-vs-true agreement over every client that holds beliefs.
    pub fn correction_accuracy(&self) -> Option<CorrectionAccuracy> {
        correction_accuracy(self.clients.iter().filter_map(|s| {
            self.beliefs
                .get(s.shard.client_id)
                .map(|b| (&s.shard, b))
        }))
    }

    pub fn correction_rows(&self) -> Vec<CorrectionRow> {
        let mut rows = Vec::new();
        for id in self.beliefs.client_ids() {
            let shard = &self.clients[id].shard;
            let Some(beliefs) = self.beliefs.get(id) else { continue };
            for (i, (s, b)) in shard.samples.iter().zip(beliefs).enumerate() {
                rows.push(CorrectionRow {
                    client_id: id,
                    sample_index: i,
                    observed_label: s.observed_label,
                    estimated_label: b.estimated_label(),
                    max_confidence: b.max_confidence(),
                });
            }
        }
        rows
    }

    /// Run all rounds, calling `sink` after each one. Detection runs once,
    /// between the last warm-up round and the first correction round.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&RoundMetrics) -> Result<()>,
    ) -> Result<ExperimentReport> {
        let wrap = |round: usize| move |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let mut global = self.initial_model();
        let mut rounds = Vec::with_capacity(self.config.train.rounds);
        let mut detection = None;
        for t in 0..self.config.train.rounds {
            if t == self.config.train.warmup_rounds {
                detection = Some(self.run_detection(&global).map_err(wrap(t))?);
            }
            let (next, m) = self.run_round(t, &global).map_err(wrap(t))?;
            sink(&m).map_err(wrap(t))?;
            rounds.push(m);
            global = next;
        }
        let last = rounds
            .last()
            .ok_or_else(|| Error::Config("train.rounds: must be >= 1".into()))?;
        let best = best_round(&rounds).unwrap_or(last);
        Ok(ExperimentReport {
            final_metrics: last.eval(),
            best_round: best.round,
            best_metrics: best.eval(),
            detection,
            correction: self.correction_rows(),
            correction_accuracy: self.correction_accuracy(),
            final_model: global,
            rounds,
        })
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(config, RunOptions::default(), |_| Ok(()))
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: RunOptions,
    sink: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<ExperimentReport> {
    Federation::new(config, options)?.run(sink)
}
