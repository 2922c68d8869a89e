//! The seeded mining → loss → backward → step loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, Sample, Triplet, UNIT_NORM_TOL};
use crate::encoder::{backward, sgd_momentum_step, EncoderParameters, EncoderShape, OptimizerState};
use crate::losses::{
    anomaly_loss, center_loss, contrastive_loss, metric_softmax_loss, triplet_focal_loss, triplet_loss,
    update_centers, ClassCenters, LossConfig, LossOutput, Pair,
};
use crate::mining::{draw_pool, select_anomaly_triplets, select_classwise_triplets, MinerConfig, MiningStats};
use crate::{seeded_rng, Error, Result, RngStream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Center,
    Contrastive,
    Triplet,
    TripletFocal,
    MetricSoftmax,
    #[default]
    Anomaly,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Center,
        LossKind::Contrastive,
        LossKind::Triplet,
        LossKind::TripletFocal,
        LossKind::MetricSoftmax,
        LossKind::Anomaly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Center => "center",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::TripletFocal => "triplet-focal",
            LossKind::MetricSoftmax => "metric-softmax",
            LossKind::Anomaly => "anomaly",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss {s:?}")))
    }
}

/// How triplets are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Genuine anchor and positive, attack negative.
    #[default]
    Anomaly,
    /// Any leaf class as anchor class, any other class as negative.
    Classwise,
}

impl FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anomaly" => Ok(MiningMode::Anomaly),
            "classwise" => Ok(MiningMode::Classwise),
            other => Err(Error::InvalidConfig(format!("unknown mining mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient norm cap applied before each step; `None` or an
    /// infinite cap disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

/// Hidden layer sizes and embedding size; the input size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: alloc::vec![64, 64],
            output_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn shape(&self, input_dim: usize) -> EncoderShape {
        EncoderShape::new(input_dim, self.hidden.clone(), self.output_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; when unset, one epoch draws about as many anchor and
    /// positive slots as there are genuine training samples.
    pub steps_per_epoch: Option<usize>,
    pub loss: LossKind,
    pub mode: MiningMode,
    pub loss_config: LossConfig,
    /// Mining settings; the margin is always taken from `loss_config`.
    pub miner: MinerConfig,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderConfig,
    pub center_update_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: None,
            loss: LossKind::Anomaly,
            mode: MiningMode::Anomaly,
            loss_config: LossConfig::default(),
            miner: MinerConfig::default(),
            optimizer: OptimizerConfig::default(),
            encoder: EncoderConfig::default(),
            center_update_rate: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn effective_miner(&self) -> MinerConfig {
        MinerConfig {
            margin: self.loss_config.margin,
            ..self.miner
        }
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossKind,
    pub mean_loss: f64,
    pub steps: usize,
    pub triplets: usize,
    pub mining: MiningStats,
    /// Largest deviation from unit norm over the probe batch.
    pub probe_norm_error: f64,
    /// Class name → appearances in emitted triplets.
    pub class_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParameters,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochRecord>,
}

/// Epoch-at-a-time trainer over a fixed training set.
pub struct Trainer<'a> {
    samples: &'a [Sample],
    cfg: TrainConfig,
    miner: MinerConfig,
    params: EncoderParameters,
    optimizer: OptimizerState,
    centers: ClassCenters,
    pool_rng: ChaCha8Rng,
    mine_rng: ChaCha8Rng,
    probe: Vec<usize>,
    steps_per_epoch: usize,
    history: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(samples: &'a [Sample], cfg: &TrainConfig) -> Result<Self> {
        cfg.loss_config.validate()?;
        if let Some(c) = cfg.optimizer.clip_norm.filter(|c| !(*c > 0.0)) {
            return Err(Error::InvalidConfig(format!("clip_norm must be > 0, got {c}")));
        }
        let miner = cfg.effective_miner();
        miner.validate()?;
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let input_dim = first.features.len();
        for s in samples {
            s.validate(input_dim)?;
        }
        let genuine = samples.iter().filter(|s| s.label.is_genuine()).count();
        let attacks = samples.len() - genuine;
        if genuine < 2 {
            return Err(Error::InsufficientSamples {
                what: "genuine training samples".into(),
                required: 2,
                available: genuine,
            });
        }
        if attacks == 0 {
            return Err(Error::InsufficientSamples {
                what: "attack training samples".into(),
                required: 1,
                available: 0,
            });
        }
        let mut init_rng = seeded_rng(cfg.seed, RngStream::Init);
        let params = EncoderParameters::init(&cfg.encoder.shape(input_dim), &mut init_rng)?;
        let optimizer = OptimizerState::new(&params, cfg.optimizer.learning_rate, cfg.optimizer.momentum);
        let mut probe_rng = seeded_rng(cfg.seed, RngStream::Probe);
        let probe = index::sample(&mut probe_rng, samples.len(), samples.len().min(16)).into_vec();
        let per_step = 2 * miner.triplets_per_batch;
        let steps_per_epoch = cfg
            .steps_per_epoch
            .unwrap_or_else(|| genuine.div_ceil(per_step))
            .max(1);
        Ok(Trainer {
            samples,
            cfg: cfg.clone(),
            miner,
            params,
            optimizer,
            centers: ClassCenters::new(cfg.center_update_rate)?,
            pool_rng: seeded_rng(cfg.seed, RngStream::Pool),
            mine_rng: seeded_rng(cfg.seed, RngStream::Mining),
            probe,
            steps_per_epoch,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> &EncoderParameters {
        &self.params
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.history.len();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut agg = MiningStats::default();
        let (mut sum_ap, mut sum_an) = (0.0, 0.0);
        let mut class_counts = BTreeMap::new();
        for _ in 0..self.steps_per_epoch {
            let step = self.step()?;
            loss_sum += step.loss;
            steps += 1;
            let s = &step.stats;
            for (k, v) in &s.candidate_histogram {
                *agg.candidate_histogram.entry(*k).or_insert(0) += v;
            }
            agg.pairs_considered += s.pairs_considered;
            agg.fallback_count += s.fallback_count;
            agg.skipped_pairs += s.skipped_pairs;
            agg.emitted += s.emitted;
            sum_ap += s.mean_d_ap * s.emitted as f64;
            sum_an += s.mean_d_an * s.emitted as f64;
            for idx in step.members {
                *class_counts.entry(self.samples[idx].label.class_name()).or_insert(0) += 1;
            }
        }
        if agg.emitted > 0 {
            agg.mean_d_ap = sum_ap / agg.emitted as f64;
            agg.mean_d_an = sum_an / agg.emitted as f64;
        }
        let probe_norm_error = self
            .probe
            .iter()
            .map(|&i| self.params.forward(&self.samples[i].features).map(|e| libm::fabs(e.norm() - 1.0)))
            .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))?;
        debug_assert!(probe_norm_error < UNIT_NORM_TOL);
        self.optimizer.epoch += 1;
        self.history.push(EpochRecord {
            epoch,
            loss: self.cfg.loss,
            mean_loss: loss_sum / steps.max(1) as f64,
            steps,
            triplets: agg.emitted,
            mining: agg,
            probe_norm_error,
            class_counts,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    fn step(&mut self) -> Result<StepResult> {
        let pool_idx = draw_pool(self.samples, &self.miner, &mut self.pool_rng);
        let pool: Vec<&Sample> = pool_idx.iter().map(|&i| &self.samples[i]).collect();
        let embeddings = self
            .params
            .embed_all(pool.iter().map(|s| s.features.as_slice()))?;
        let (triplets, stats) = match self.cfg.mode {
            MiningMode::Anomaly => {
                let genuine: Vec<bool> = pool.iter().map(|s| s.label.is_genuine()).collect();
                select_anomaly_triplets(&embeddings, &genuine, &self.miner, &mut self.mine_rng)?
            }
            MiningMode::Classwise => {
                let classes: Vec<u32> = pool.iter().map(|s| s.label.class_index()).collect();
                select_classwise_triplets(&embeddings, &classes, &self.miner, &mut self.mine_rng)?
            }
        };
        if triplets.is_empty() {
            return Ok(StepResult {
                loss: 0.0,
                stats,
                members: Vec::new(),
            });
        }

        // Compact the pool to the rows that take part in the batch.
        let mut rows: Vec<usize> = Vec::new();
        let mut slot = BTreeMap::new();
        let mut remap = |i: usize, rows: &mut Vec<usize>| {
            *slot.entry(i).or_insert_with(|| {
                rows.push(i);
                rows.len() - 1
            })
        };
        let local: Vec<Triplet> = triplets
            .iter()
            .map(|t| {
                let a = remap(t.anchor, &mut rows);
                let p = remap(t.positive, &mut rows);
                let n = remap(t.negative, &mut rows);
                Triplet::new(a, p, n)
            })
            .collect();
        let table: Vec<Embedding> = rows.iter().map(|&i| embeddings[i].clone()).collect();
        let members: Vec<usize> = triplets
            .iter()
            .flat_map(|t| [t.anchor, t.positive, t.negative])
            .map(|i| pool_idx[i])
            .collect();

        let output = self.evaluate_loss(&table, &local, &rows, &pool)?;
        if !output.value.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let inputs: Vec<&[f64]> = rows.iter().map(|&i| pool[i].features.as_slice()).collect();
        let mut grads = backward(&self.params, &inputs, &output.gradients)?;
        if let Some(cap) = self.cfg.optimizer.clip_norm.filter(|c| c.is_finite()) {
            grads.clip_norm(cap);
        }
        sgd_momentum_step(&mut self.params, &grads, &mut self.optimizer)?;
        Ok(StepResult {
            loss: output.value,
            stats,
            members,
        })
    }

    fn evaluate_loss(
        &mut self,
        table: &[Embedding],
        triplets: &[Triplet],
        rows: &[usize],
        pool: &[&Sample],
    ) -> Result<LossOutput> {
        let cfg = &self.cfg.loss_config;
        match self.cfg.loss {
            LossKind::Triplet => triplet_loss(table, triplets, cfg.margin),
            LossKind::TripletFocal => triplet_focal_loss(table, triplets, cfg.margin, cfg.sigma),
            LossKind::MetricSoftmax => metric_softmax_loss(table, triplets, cfg.softmax_sign),
            LossKind::Anomaly => anomaly_loss(table, triplets, cfg),
            LossKind::Contrastive => {
                let pairs: Vec<Pair> = triplets
                    .iter()
                    .flat_map(|t| {
                        [
                            Pair {
                                first: t.anchor,
                                second: t.positive,
                                positive: true,
                            },
                            Pair {
                                first: t.anchor,
                                second: t.negative,
                                positive: false,
                            },
                        ]
                    })
                    .collect();
                contrastive_loss(table, &pairs, cfg.margin)
            }
            LossKind::Center => {
                let classes: Vec<u32> = rows
                    .iter()
                    .map(|&i| match self.cfg.mode {
                        MiningMode::Anomaly => u32::from(!pool[i].label.is_genuine()),
                        MiningMode::Classwise => pool[i].label.class_index(),
                    })
                    .collect();
                let unseen: BTreeSet<u32> = classes
                    .iter()
                    .filter(|c| !self.centers.centers.contains_key(c))
                    .copied()
                    .collect();
                if !unseen.is_empty() {
                    // New classes start at their batch mean.
                    let (t, c): (Vec<Embedding>, Vec<u32>) = table
                        .iter()
                        .zip(&classes)
                        .filter(|(_, c)| unseen.contains(c))
                        .map(|(e, c)| (e.clone(), *c))
                        .unzip();
                    self.centers = update_centers(&self.centers, &t, &c)?;
                }
                let out = center_loss(table, &classes, &self.centers)?;
                self.centers = update_centers(&self.centers, table, &classes)?;
                Ok(out)
            }
        }
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            optimizer: self.optimizer,
            history: self.history,
        }
    }
}

struct StepResult {
    loss: f64,
    stats: MiningStats,
    members: Vec<usize>,
}

/// Trains an encoder on `samples` for `cfg.epochs` epochs.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(samples, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}
