//! Payer-response prediction for healthcare claims.
//!
//! The crate covers the full loop: ingesting claim/remittance exports,
//! deriving supervision targets, sparse featurization, a small reverse-mode
//! autodiff engine, the gated multi-task network with its ablation variants,
//! Adam training, leakage-safe time-series evaluation, gradient-based
//! explanations, and a synthetic corpus generator for end-to-end checks.

pub mod cli;
pub mod diffkit;
pub mod eval;
pub mod explain;
pub mod featurize;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;
