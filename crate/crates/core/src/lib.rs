//! Simulation framework for representation-encoding federated meta-learning
//! on few-shot fault-diagnosis tasks.
//!
//! The crate is organized around the stages of the protocol:
//!
//! - [`autodiff`]: a small reverse-mode differentiation engine with support
//!   for differentiating through one inner gradient step (exact meta-gradients).
//! - [`model`]: the 1D-CNN diagnosis network with an explicit encoder/predictor
//!   parameter partition, plus checkpoint serialization.
//! - [`data`]: labeled signal windows, a synthetic multi-condition vibration
//!   generator, CSV ingestion, and N-way K-shot episode sampling.
//! - [`fedproto`]: client-side adaptive interpolation, representation encoding,
//!   predictor meta-updating and fine-tuning; server-side weighted aggregation
//!   and round orchestration, with FedAvg/FedProx baselines.
//! - [`eval`]: cross-condition fold protocols, accuracy metrics, suite
//!   execution, results tables, and embedding export.
//! - [`config`]: experiment configuration (key-value files + overrides).

pub mod autodiff;
pub mod seeds;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fedproto;
pub mod model;

pub use error::{Error, Result};
