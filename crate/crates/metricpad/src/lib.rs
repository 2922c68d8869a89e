//! Files, configuration and the command line around `metricpad-core`.
//!
//! - [`io`]: JSONL/CSV samples, score CSVs and confusion matrices.
//! - [`checkpoint`]: versioned JSON checkpoints of a trained encoder.
//! - [`config`]: the TOML run configuration and flag overrides.
//! - [`manifest`]: per-run manifests with config and output hashes.
//! - [`cli`]: the `generate`, `train`, `evaluate`, `ablation` and `report` commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod manifest;

pub use error::{Error, Result};
