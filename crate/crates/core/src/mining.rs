//! Semi-hard batch negative mining.
//!
//! Each step embeds a pool of samples with the current encoder, picks
//! anchor-positive pairs and, for every pair, draws uniformly among the
//! negatives that satisfy `D_ap − D_an < m`. In anomaly mode the anchor and
//! positive are always genuine and the negative is any attack. The class-wise
//! variant treats every leaf class alike and serves as the ablation baseline.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{sq_dist, Embedding, Sample, Triplet};
use crate::encoder::EncoderParameters;
use crate::{Error, Result};

/// What to do when no negative satisfies the margin criterion for a pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    SkipPair,
    /// Use the negative closest to the anchor.
    #[default]
    HardestNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinerConfig {
    pub pool_size: usize,
    pub triplets_per_batch: usize,
    pub margin: f64,
    pub fallback: Fallback,
    /// Lower bound on the genuine share of each drawn pool.
    pub min_genuine_fraction: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            pool_size: 128,
            triplets_per_batch: 12,
            margin: 0.2,
            fallback: Fallback::HardestNegative,
            min_genuine_fraction: 0.25,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 3 {
            return Err(Error::InvalidConfig(format!(
                "pool_size must be at least 3, got {}",
                self.pool_size
            )));
        }
        if self.triplets_per_batch == 0 {
            return Err(Error::InvalidConfig("triplets_per_batch must be at least 1".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.min_genuine_fraction) {
            return Err(Error::InvalidConfig(format!(
                "min_genuine_fraction must lie in [0, 1], got {}",
                self.min_genuine_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    /// Number of satisfying negatives → number of pairs that had that many.
    pub candidate_histogram: BTreeMap<usize, usize>,
    pub pairs_considered: usize,
    pub fallback_count: usize,
    pub skipped_pairs: usize,
    pub emitted: usize,
    pub mean_d_ap: f64,
    pub mean_d_an: f64,
}

impl MiningStats {
    fn finish(&mut self, sum_ap: f64, sum_an: f64) {
        if self.emitted > 0 {
            self.mean_d_ap = sum_ap / self.emitted as f64;
            self.mean_d_an = sum_an / self.emitted as f64;
        }
    }
}

/// Triplets indexing into the pool, with the embeddings used to mine them.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub triplets: Vec<Triplet>,
    pub embeddings: Vec<Embedding>,
    pub stats: MiningStats,
}

/// Draws the indices of a mining pool from `samples`.
///
/// At most `pool_size` samples are taken without replacement. Genuine samples
/// get their natural share of the pool, raised to `min_genuine_fraction` when
/// it falls short.
pub fn draw_pool<R: Rng + ?Sized>(samples: &[Sample], cfg: &MinerConfig, rng: &mut R) -> Vec<usize> {
    let (genuine, attacks): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].label.is_genuine());
    let total = samples.len();
    if total <= cfg.pool_size {
        return (0..total).collect();
    }
    let natural = (cfg.pool_size * genuine.len() + total / 2) / total;
    let floor = libm::ceil(cfg.min_genuine_fraction * cfg.pool_size as f64) as usize;
    let mut n_gen = natural.max(floor).min(genuine.len());
    let mut n_att = (cfg.pool_size - n_gen).min(attacks.len());
    n_gen = (cfg.pool_size - n_att).min(genuine.len());
    n_att = n_att.min(cfg.pool_size - n_gen);
    let mut pool: Vec<usize> = index::sample(rng, genuine.len(), n_gen)
        .into_iter()
        .map(|i| genuine[i])
        .collect();
    pool.extend(index::sample(rng, attacks.len(), n_att).into_iter().map(|i| attacks[i]));
    pool
}

/// Picks `count` ordered pairs out of `n` members, uniformly, without
/// replacement when there are enough pairs.
fn pick_ordered_pairs<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = n * (n - 1);
    let decode = |k: usize| {
        let a = k / (n - 1);
        let r = k % (n - 1);
        (a, if r >= a { r + 1 } else { r })
    };
    if total >= count {
        index::sample(rng, total, count).into_iter().map(decode).collect()
    } else {
        (0..count).map(|_| decode(rng.random_range(0..total))).collect()
    }
}

/// Chooses a negative for one pair, updating the statistics. Returns `None`
/// when the pair is skipped.
fn choose_negative<R: Rng + ?Sized>(
    embeddings: &[Embedding],
    anchor: usize,
    d_ap: f64,
    negatives: &[usize],
    cfg: &MinerConfig,
    stats: &mut MiningStats,
    rng: &mut R,
) -> Option<(usize, f64)> {
    let a = embeddings[anchor].as_slice();
    let mut satisfying = Vec::new();
    let mut hardest: Option<(usize, f64)> = None;
    for &n in negatives {
        let d_an = sq_dist(a, embeddings[n].as_slice());
        if d_ap - d_an < cfg.margin {
            satisfying.push((n, d_an));
        }
        if hardest.is_none_or(|(_, best)| d_an < best) {
            hardest = Some((n, d_an));
        }
    }
    stats.pairs_considered += 1;
    *stats.candidate_histogram.entry(satisfying.len()).or_insert(0) += 1;
    if !satisfying.is_empty() {
        return Some(satisfying[rng.random_range(0..satisfying.len())]);
    }
    match cfg.fallback {
        Fallback::HardestNegative => {
            stats.fallback_count += 1;
            hardest
        }
        Fallback::SkipPair => {
            stats.skipped_pairs += 1;
            None
        }
    }
}

/// Anomaly-mode selection over precomputed embeddings.
///
/// `genuine[i]` flags the closed-set members. Anchor-positive pairs are
/// ordered genuine pairs drawn uniformly; negatives are attacks.
pub fn select_anomaly_triplets<R: Rng + ?Sized>(
    embeddings: &[Embedding],
    genuine: &[bool],
    cfg: &MinerConfig,
    rng: &mut R,
) -> Result<(Vec<Triplet>, MiningStats)> {
    cfg.validate()?;
    if genuine.len() != embeddings.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            genuine.len()
        )));
    }
    let (gen, att): (Vec<usize>, Vec<usize>) = (0..genuine.len()).partition(|&i| genuine[i]);
    if gen.len() < 2 {
        return Err(Error::InsufficientSamples {
            what: "genuine samples in the mining pool".into(),
            required: 2,
            available: gen.len(),
        });
    }
    if att.is_empty() {
        return Err(Error::InsufficientSamples {
            what: "attack samples in the mining pool".into(),
            required: 1,
            available: 0,
        });
    }
    let mut stats = MiningStats::default();
    let mut triplets = Vec::with_capacity(cfg.triplets_per_batch);
    let (mut sum_ap, mut sum_an) = (0.0, 0.0);
    for (ai, pi) in pick_ordered_pairs(gen.len(), cfg.triplets_per_batch, rng) {
        let (anchor, positive) = (gen[ai], gen[pi]);
        let d_ap = sq_dist(embeddings[anchor].as_slice(), embeddings[positive].as_slice());
        if let Some((negative, d_an)) = choose_negative(embeddings, anchor, d_ap, &att, cfg, &mut stats, rng) {
            triplets.push(Triplet::new(anchor, positive, negative));
            sum_ap += d_ap;
            sum_an += d_an;
        }
    }
    stats.emitted = triplets.len();
    stats.finish(sum_ap, sum_an);
    Ok((triplets, stats))
}

/// Class-wise selection: the anchor class is drawn uniformly among classes
/// with at least two pool members, the pair uniformly within it, and the
/// negative from any other class.
pub fn select_classwise_triplets<R: Rng + ?Sized>(
    embeddings: &[Embedding],
    classes: &[u32],
    cfg: &MinerConfig,
    rng: &mut R,
) -> Result<(Vec<Triplet>, MiningStats)> {
    cfg.validate()?;
    if classes.len() != embeddings.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            classes.len()
        )));
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        members.entry(*c).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::InsufficientSamples {
            what: "classes in the mining pool".into(),
            required: 2,
            available: members.len(),
        });
    }
    let eligible: Vec<u32> = members
        .iter()
        .filter(|(_, m)| m.len() >= 2)
        .map(|(c, _)| *c)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientSamples {
            what: "members of any single class in the mining pool".into(),
            required: 2,
            available: 1,
        });
    }
    let mut stats = MiningStats::default();
    let mut triplets = Vec::with_capacity(cfg.triplets_per_batch);
    let (mut sum_ap, mut sum_an) = (0.0, 0.0);
    for _ in 0..cfg.triplets_per_batch {
        let class = eligible[rng.random_range(0..eligible.len())];
        let own = &members[&class];
        let (ai, pi) = pick_ordered_pairs(own.len(), 1, rng)[0];
        let (anchor, positive) = (own[ai], own[pi]);
        let negatives: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] != class).collect();
        let d_ap = sq_dist(embeddings[anchor].as_slice(), embeddings[positive].as_slice());
        if let Some((negative, d_an)) =
            choose_negative(embeddings, anchor, d_ap, &negatives, cfg, &mut stats, rng)
        {
            triplets.push(Triplet::new(anchor, positive, negative));
            sum_ap += d_ap;
            sum_an += d_an;
        }
    }
    stats.emitted = triplets.len();
    stats.finish(sum_ap, sum_an);
    Ok((triplets, stats))
}

fn embed_pool(encoder: &EncoderParameters, pool: &[&Sample]) -> Result<Vec<Embedding>> {
    encoder.embed_all(pool.iter().map(|s| s.features.as_slice()))
}

/// Embeds `pool` with the current encoder and mines one anomaly-mode batch.
/// Triplet indices refer to positions in `pool`.
pub fn mine_batch<R: Rng + ?Sized>(
    encoder: &EncoderParameters,
    pool: &[&Sample],
    cfg: &MinerConfig,
    rng: &mut R,
) -> Result<MinedBatch> {
    let genuine: Vec<bool> = pool.iter().map(|s| s.label.is_genuine()).collect();
    let embeddings = embed_pool(encoder, pool)?;
    let (triplets, stats) = select_anomaly_triplets(&embeddings, &genuine, cfg, rng)?;
    Ok(MinedBatch {
        triplets,
        embeddings,
        stats,
    })
}

/// Class-wise counterpart of [`mine_batch`], keyed on leaf classes.
pub fn mine_batch_classwise<R: Rng + ?Sized>(
    encoder: &EncoderParameters,
    pool: &[&Sample],
    cfg: &MinerConfig,
    rng: &mut R,
) -> Result<MinedBatch> {
    let classes: Vec<u32> = pool.iter().map(|s| s.label.class_index()).collect();
    let embeddings = embed_pool(encoder, pool)?;
    let (triplets, stats) = select_classwise_triplets(&embeddings, &classes, cfg, rng)?;
    Ok(MinedBatch {
        triplets,
        embeddings,
        stats,
    })
}
