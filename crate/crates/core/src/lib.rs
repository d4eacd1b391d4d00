//! Pseudo-label generation and evaluation for weakly-supervised temporal
//! action localization.
//!
//! The pipeline runs per video: snippet predictions are thresholded into
//! scored proposals ([`weak`]), fused into pseudo proposals ([`fusion`]),
//! surrounded by uncertainty masks ([`mask`]) and turned into anchor targets
//! and losses ([`targets`]). [`eval`] scores detections against ground truth
//! and [`sim`] provides a seeded synthetic corpus.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod sim;
pub mod targets;
pub mod temporal;
pub mod weak;

pub use error::{Error, Result};
