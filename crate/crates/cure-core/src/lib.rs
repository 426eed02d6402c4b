//! Multi-norm certified training and certification.
//!
//! This crate trains classifiers to be certifiably robust against l-inf and
//! l-2 perturbations simultaneously and certifies the result:
//!
//! - a minimal sequential network engine with exact reverse-mode gradients
//!   ([`network`]),
//! - differentiable interval (box) bound propagation with logit-difference
//!   bounds and an l2-aware first-layer tightening ([`bounds`]),
//! - PGD attacks and truncated-ball propagation-region selection
//!   ([`attack`]),
//! - the multi-norm training losses: single-norm small-box losses, joint,
//!   per-sample max, random split, KL bound alignment, and the combined
//!   from-scratch objective ([`loss`]),
//! - gradient projection linking natural and certified training
//!   ([`projection`]),
//! - the training orchestrator with epsilon annealing, warm-up
//!   regularization, Adam, and fine-tuning ([`trainer`]),
//! - a certification harness reporting clean, per-norm, and union certified
//!   accuracy ([`certify`]),
//! - dataset ingestion (MNIST IDX, synthetic blobs) and run plumbing
//!   ([`data`], [`config`], [`cli`]).

pub mod attack;
pub mod bounds;
pub mod certify;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod network;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CureError, Result};
pub use network::{ConvGeom, InitScheme, Layer, Network, UpdateDelta};
pub use tensor::Tensor;

/// Artifact version string embedded in reports and manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
