//! Differentially private on-policy distillation for tiny autoregressive
//! language models, end to end on one desk: synthetic corpora from a
//! control-coded Markov chain, a windowed feed-forward student with
//! hand-derived gradients, a frozen teacher, per-example clipping and
//! Gaussian noising, and a Renyi-DP ledger that reports the exact
//! (epsilon, delta) spent.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release -p dpopd --example generate_corpus
//! cargo run --release -p dpopd --example gradient_check
//! cargo run --release -p dpopd --example privacy_accounting
//! cargo run --release -p dpopd --example dp_sgd_mechanism
//! cargo run --release -p dpopd --example train_student
//! cargo run --release -p dpopd --example rollout_eval
//! cargo run --release -p dpopd --example beta_sweep
//! cargo run --release -p dpopd --example compare_methods
//! ```
//!
//! The same capabilities are reachable through the thin `dpopd` binary
//! (`gen-data`, `train-teacher`, `train`, `eval`, `compare`, `account`,
//! `calibrate`, `sweep-beta`).

pub mod accountant;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
