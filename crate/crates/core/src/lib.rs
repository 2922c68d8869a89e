//! Metric-learning anomaly detection for face presentation attack detection.
//!
//! Genuine captures are treated as a closed set that the encoder learns to
//! pack tightly, while attacks of any instrument are an open set pushed away
//! from it. The crate carries the whole algorithmic pipeline:
//!
//! - [`embedding`]: samples, labels, unit-norm embeddings and squared distances.
//! - [`losses`]: center, contrastive, triplet, triplet focal, metric-softmax and
//!   the combined anomaly loss, all with hand-derived gradients.
//! - [`encoder`]: an MLP encoder with a normalized output, its backward pass
//!   and SGD with momentum.
//! - [`mining`]: semi-hard batch negative mining with genuine anchors, and the
//!   class-wise variant used as an ablation baseline.
//! - [`train`]: the seeded mining → loss → backward → step loop.
//! - [`fewshot`]: classifier-free posterior scoring against reference pairs.
//! - [`eval`]: FAR/FRR/EER/HTER and APCER/BPCER/ACER reports.
//! - [`bench`]: synthetic open-set benchmarks following the two-tier PAI taxonomy.
//! - [`protocol`]: intra and holdout protocols plus the ablation table.
//!
//! # No-std
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints and
//! the command line live in the companion `metricpad` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bench;
pub mod embedding;
pub mod encoder;
mod error;
pub mod eval;
pub mod fewshot;
pub mod losses;
pub mod mining;
pub mod protocol;
mod rng;
pub mod train;

pub use embedding::{
    normalize, pairwise_distances, squared_distance, Embedding, Label, PaiType, Sample, Split,
    Triplet,
};
pub use error::{Error, Result};
pub use rng::{seeded_rng, RngStream};
