//! Self-contained machine-unlearning toolkit built around the diagonal
//! Fisher information of retain/forget partitions.
//!
//! Pipeline: pretrain a model, compute the FIM diagonal over the forget and
//! retain sets, rank weights by the forget/retain ratio, zero the weights
//! above a threshold, and fine-tune only those weights on the retain set.
//! Baselines (gold retrain, plain fine-tune, random-label, zero-weights
//! ablation), a membership-inference evaluation harness, and CSV/JSON/SVG
//! reporting round out the experiment loop.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod fim;
pub mod mia;
pub mod report;
pub mod models;
pub mod unlearn;
pub mod rng;

pub use error::{Error, Result};
