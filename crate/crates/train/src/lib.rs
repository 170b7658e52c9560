//! Training harness for block-scaled 4-bit linear layers.
//!
//! A small transformer classifier on a synthetic token task, with every
//! linear-layer matmul quantized through the `mxfp4` codec. The harness
//! wires together unbiased double-quantized backward passes, an EMA-guided
//! weight quantizer, per-element update amplification, oscillation
//! diagnostics, and comparison baselines (dampening, freezing), all under a
//! single TOML config and a counter-based RNG so runs are bit-reproducible.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runner;
