//! Deterministic federated-learning simulator for training under noisy client
//! labels.
//!
//! The protocol runs in two stages. During warm-up every selected client trains
//! with logit-adjusted cross-entropy. After warm-up, per-class loss profiles of
//! all clients are clustered with a two-component Gaussian mixture to flag noisy
//! clients. Noisy clients then jointly optimise their model and a learnable
//! per-sample label belief under a masked three-term objective, while the
//! server aggregates with a Weiszfeld geometric median.
//!
//! Modules:
//! - [`dataset`]: synthetic blobs, Dirichlet partitioning, label-noise injection
//! - [`nn`]: ReLU perceptron with analytic gradients and SGD
//! - [`correction`]: label beliefs and the masked triplet objective
//! - [`detection`]: loss matrix and two-component GMM client partition
//! - [`aggregation`]: weighted average, coordinate median, geometric median
//! - [`orchestrator`]: round loop, local updates, evaluation and reports

pub mod aggregation;
pub mod correction;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod nn;
pub mod orchestrator;
pub mod rng;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
