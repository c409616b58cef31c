//! Adversarial contrastive pretraining with invariance regularization,
//! finetuning protocols and robustness evaluation.

pub mod adversary;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod kmeans;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod verify;

pub use error::{AirError, Result};
