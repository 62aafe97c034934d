//! Experiment configuration with protocol defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationMethod, GeometricMedianOptions};
use crate::correction::MaskLossSource;
use crate::dataset::{NoiseScenario, NoiseSpec};
use crate::error::{Error, Result};
use crate::nn::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Optional CSV files replacing the synthetic train/test sets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 8,
            train_samples: 8000,
            test_samples: 2000,
            separation: 2.5,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub gamma: f64,
    pub min_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            gamma: 0.5,
            min_per_client: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseScenario,
    pub max_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseScenario::Symmetric,
            max_rate: 0.8,
        }
    }
}

impl NoiseConfig {
    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            max_rate: self.max_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Add `log(prior)` to the logits on the clean/warm-up path.
    pub logit_adjust: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            warmup_rounds: 10,
            clients_per_round: 5,
            local_epochs: 5,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            logit_adjust: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Percentage of each batch kept by the small-loss mask.
    pub tau: f64,
    /// Step size for belief updates.
    pub eta: f64,
    /// Share of the locally trained model kept by the pre-merge.
    pub zeta: f64,
    /// Scale of belief logits at initialisation and after merging.
    pub k: f64,
    pub mask: bool,
    pub mask_loss_source: MaskLossSource,
    pub persist_beliefs: bool,
    /// Never update or merge beliefs.
    pub freeze_beliefs: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            tau: 80.0,
            eta: 1000.0,
            zeta: 0.8,
            k: 10.0,
            mask: true,
            mask_loss_source: MaskLossSource::Observed,
            persist_beliefs: true,
            freeze_beliefs: false,
        }
    }
}

/// How the clean/noisy split is decided at the end of warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    #[default]
    Gmm,
    AllClean,
    AllNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub mode: DetectionMode,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            mode: DetectionMode::Gmm,
            max_iters: crate::detection::DEFAULT_MAX_ITERS,
            tol: crate::detection::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub method: AggregationMethod,
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        let gm = GeometricMedianOptions::default();
        Self {
            method: AggregationMethod::GeometricMedian,
            eps: gm.eps,
            max_iter: gm.max_iter,
        }
    }
}

impl AggregationConfig {
    pub fn gm_options(&self) -> GeometricMedianOptions {
        GeometricMedianOptions {
            eps: self.eps,
            max_iter: self.max_iter,
        }
    }
}

/// Every knob of one simulated experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Also run the plain averaging baseline and report it alongside.
    pub compare_baseline: bool,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub noise: NoiseConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub correction: CorrectionConfig,
    pub detection: DetectionConfig,
    pub aggregation: AggregationConfig,
}

fn require(cond: bool, field: &str, msg: impl std::fmt::Display) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

impl ExperimentConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture::new(
            self.data.input_dim,
            self.model.hidden.clone(),
            self.data.num_classes,
        )
    }

    /// Plain averaging baseline on the same data, noise and seeds: no
    /// detection, no logit adjustment, sample-weighted averaging.
    pub fn fedavg_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.compare_baseline = false;
        cfg.detection.mode = DetectionMode::AllClean;
        cfg.train.logit_adjust = false;
        cfg.aggregation.method = AggregationMethod::Average;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        require(d.num_classes >= 2, "data.num_classes", "must be >= 2")?;
        require(d.input_dim >= 2, "data.input_dim", "must be >= 2")?;
        require(
            d.train_samples >= d.num_classes,
            "data.train_samples",
            "must be >= data.num_classes",
        )?;
        require(
            d.test_samples >= d.num_classes,
            "data.test_samples",
            "must be >= data.num_classes",
        )?;
        require(
            d.separation > 0.0 && d.separation.is_finite(),
            "data.separation",
            "must be positive",
        )?;

        let p = &self.partition;
        require(p.clients >= 2, "partition.clients", "must be >= 2")?;
        require(
            p.gamma > 0.0 && p.gamma.is_finite(),
            "partition.gamma",
            "must be positive",
        )?;

        require(
            (0.0..=1.0).contains(&self.noise.max_rate),
            "noise.max_rate",
            "must lie in [0, 1]",
        )?;
        require(
            self.model.hidden.iter().all(|h| *h > 0),
            "model.hidden",
            "widths must be positive",
        )?;

        let t = &self.train;
        require(
            t.clients_per_round >= 1 && t.clients_per_round <= p.clients,
            "train.clients_per_round",
            format!("must lie in [1, {}]", p.clients),
        )?;
        require(
            t.warmup_rounds > 0 && t.warmup_rounds < t.rounds,
            "train.warmup_rounds",
            format!("must satisfy 0 < warmup_rounds < rounds ({})", t.rounds),
        )?;
        require(t.local_epochs >= 1, "train.local_epochs", "must be >= 1")?;
        require(t.batch_size >= 1, "train.batch_size", "must be >= 1")?;
        require(t.lr >= 0.0 && t.lr.is_finite(), "train.lr", "must be >= 0")?;
        require(
            t.momentum >= 0.0 && t.momentum.is_finite(),
            "train.momentum",
            "must be >= 0",
        )?;
        require(
            t.weight_decay >= 0.0 && t.weight_decay.is_finite(),
            "train.weight_decay",
            "must be >= 0",
        )?;

        let c = &self.correction;
        require(c.alpha >= 0.0 && c.alpha.is_finite(), "correction.alpha", "must be >= 0")?;
        require(c.beta >= 0.0 && c.beta.is_finite(), "correction.beta", "must be >= 0")?;
        require(
            c.tau > 0.0 && c.tau <= 100.0,
            "correction.tau",
            "must lie in (0, 100]",
        )?;
        require(c.eta > 0.0 && c.eta.is_finite(), "correction.eta", "must be positive")?;
        require(
            (0.0..=1.0).contains(&c.zeta),
            "correction.zeta",
            "must lie in [0, 1]",
        )?;
        require(c.k > 0.0 && c.k.is_finite(), "correction.k", "must be positive")?;

        require(
            self.detection.max_iters >= 1,
            "detection.max_iters",
            "must be >= 1",
        )?;
        require(self.detection.tol > 0.0, "detection.tol", "must be positive")?;
        require(self.aggregation.eps > 0.0, "aggregation.eps", "must be positive")?;
        require(
            self.aggregation.max_iter >= 1,
            "aggregation.max_iter",
            "must be >= 1",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.correction.alpha, 0.5);
        assert_eq!(c.correction.beta, 0.1);
        assert_eq!(c.correction.tau, 80.0);
        assert_eq!(c.correction.eta, 1000.0);
        assert_eq!(c.correction.zeta, 0.8);
        assert_eq!(c.train.local_epochs, 5);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.aggregation.eps, 1e-5);
        assert_eq!(c.aggregation.max_iter, 10);
    }

    #[test]
    fn invariant_violations_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.correction.tau = 0.0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("correction.tau"), "{e}");

        let mut c = ExperimentConfig::default();
        c.train.warmup_rounds = c.train.rounds;
        assert!(c.validate().unwrap_err().to_string().contains("warmup_rounds"));

        let mut c = ExperimentConfig::default();
        c.train.clients_per_round = 21;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::default();
        c.correction.zeta = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn baseline_preset() {
        let b = ExperimentConfig::default().fedavg_baseline();
        assert_eq!(b.detection.mode, DetectionMode::AllClean);
        assert_eq!(b.aggregation.method, AggregationMethod::Average);
        assert!(!b.train.logit_adjust);
        b.validate().unwrap();
    }
}
