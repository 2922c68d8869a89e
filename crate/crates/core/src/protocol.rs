//! Evaluation protocols and the loss/mining ablation.
//!
//! An intra protocol uses the declared splits. A holdout protocol removes
//! every sample matching a domain tag or an instrument from training and
//! development, and tests on exactly those samples.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::Benchmark;
use crate::embedding::{PaiType, Sample, Split};
use crate::encoder::EncoderParameters;
use crate::eval::{confusion_matrix, pad_report_with, ApcerGranularity, ConfusionMatrix, EvalReport, ScoreSet};
use crate::fewshot::{build_reference_sets, score_split, ReferenceSets, DEFAULT_PAIRS};
use crate::train::{LossKind, MiningMode, TrainConfig, TrainOutcome, Trainer};
use crate::{seeded_rng, Error, Result, RngStream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    #[default]
    Intra,
    Holdout,
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(ProtocolKind::Intra),
            "holdout" => Ok(ProtocolKind::Holdout),
            other => Err(Error::InvalidProtocol(format!("unknown protocol {other:?}, expected intra or holdout"))),
        }
    }
}

/// An instrument type, optionally narrowed to one subtype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutPai {
    pub pai_type: PaiType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pai_subtype: Option<String>,
}

impl FromStr for HoldoutPai {
    type Err = Error;

    /// Parses `type` or `type/subtype`.
    fn from_str(s: &str) -> Result<Self> {
        let (t, sub) = match s.split_once('/') {
            Some((t, sub)) => (t, Some(sub)),
            None => (s, None),
        };
        let pai_type: PaiType = t.parse()?;
        if let Some(sub) = sub {
            crate::Label::attack(pai_type, sub)?;
        }
        Ok(HoldoutPai {
            pai_type,
            pai_subtype: sub.map(String::from),
        })
    }
}

impl fmt::Display for HoldoutPai {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.pai_subtype {
            Some(sub) => write!(f, "{}/{sub}", self.pai_type),
            None => write!(f, "{}", self.pai_type),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_tag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_pai: Option<HoldoutPai>,
}

impl ProtocolSpec {
    pub fn intra() -> Self {
        ProtocolSpec::default()
    }

    pub fn holdout_pai(pai: HoldoutPai) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Holdout,
            holdout_tag: None,
            holdout_pai: Some(pai),
        }
    }

    pub fn holdout_tag(tag: &str) -> Self {
        ProtocolSpec {
            kind: ProtocolKind::Holdout,
            holdout_tag: Some(tag.into()),
            holdout_pai: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.holdout_tag, &self.holdout_pai) {
            (ProtocolKind::Intra, None, None) => Ok(()),
            (ProtocolKind::Intra, _, _) => Err(Error::InvalidProtocol(
                "an intra protocol takes no holdout".into(),
            )),
            (ProtocolKind::Holdout, Some(_), None) | (ProtocolKind::Holdout, None, Some(_)) => Ok(()),
            (ProtocolKind::Holdout, _, _) => Err(Error::InvalidProtocol(
                "a holdout protocol needs exactly one of holdout_tag or holdout_pai".into(),
            )),
        }
    }

    fn holds_out(&self, s: &Sample) -> bool {
        if let Some(tag) = &self.holdout_tag {
            return s.domain_tag == *tag;
        }
        match &self.holdout_pai {
            Some(pai) => {
                s.label.pai_type() == Some(pai.pai_type)
                    && pai.pai_subtype.as_deref().is_none_or(|sub| s.label.pai_subtype() == Some(sub))
            }
            None => false,
        }
    }
}

/// Train, dev and test sets produced by a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn partition(bench: &Benchmark, spec: &ProtocolSpec) -> Result<Partition> {
    spec.validate()?;
    let mut p = Partition {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let by_tag = spec.holdout_tag.is_some();
    for s in &bench.samples {
        let held = spec.holds_out(s);
        match (spec.kind, s.split) {
            (ProtocolKind::Intra, Split::Train) => p.train.push(s.clone()),
            (ProtocolKind::Intra, Split::Dev) => p.dev.push(s.clone()),
            (ProtocolKind::Intra, Split::Test) => p.test.push(s.clone()),
            (ProtocolKind::Holdout, _) if held => p.test.push(s.clone()),
            (ProtocolKind::Holdout, Split::Train) => p.train.push(s.clone()),
            (ProtocolKind::Holdout, Split::Dev) => p.dev.push(s.clone()),
            // Held-out instruments are scored against the usual test genuine.
            (ProtocolKind::Holdout, Split::Test) if !by_tag && s.label.is_genuine() => p.test.push(s.clone()),
            (ProtocolKind::Holdout, Split::Test) => {}
        }
    }
    for (name, set) in [("train", &p.train), ("dev", &p.dev)] {
        let genuine = set.iter().filter(|s| s.label.is_genuine()).count();
        if genuine == 0 || genuine == set.len() {
            return Err(Error::InvalidProtocol(format!(
                "the {name} split has no {} after the holdout",
                if genuine == 0 { "genuine samples" } else { "attacks" }
            )));
        }
    }
    let test_genuine = p.test.iter().filter(|s| s.label.is_genuine()).count();
    if test_genuine == 0 || test_genuine == p.test.len() {
        return Err(Error::InvalidProtocol("the test split needs genuine samples and attacks".into()));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Number of reference pairs `M` for few-shot scoring.
    pub references: usize,
    pub apcer: ApcerGranularity,
    /// Stop when dev AER has not improved for this many epochs, keeping the
    /// best parameters.
    pub early_stop_patience: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            references: DEFAULT_PAIRS,
            apcer: ApcerGranularity::Type,
            early_stop_patience: None,
        }
    }
}

/// Scores and metrics for one trained encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub references: ReferenceSets,
    pub dev_scores: ScoreSet,
    pub test_scores: ScoreSet,
    pub report: EvalReport,
    pub confusion: ConfusionMatrix,
}

/// Builds references from the training set and scores dev and test.
pub fn evaluate(params: &EncoderParameters, part: &Partition, cfg: &PipelineConfig) -> Result<Evaluation> {
    let sign = cfg.train.loss_config.softmax_sign;
    let mut rng = seeded_rng(cfg.train.seed, RngStream::References);
    let references = build_reference_sets(params, &part.train, cfg.references, &mut rng)?;
    let dev_scores = ScoreSet::from_scored(&score_split(params, &references, &part.dev, sign)?);
    let test_scores = ScoreSet::from_scored(&score_split(params, &references, &part.test, sign)?);
    let report = pad_report_with(&dev_scores, &test_scores, cfg.apcer)?;
    let embedded = part
        .test
        .iter()
        .map(|s| Ok((params.forward(&s.features)?, s.label.clone())))
        .collect::<Result<Vec<_>>>()?;
    let confusion = confusion_matrix(&embedded, &references)?;
    Ok(Evaluation {
        references,
        dev_scores,
        test_scores,
        report,
        confusion,
    })
}

fn dev_aer(params: &EncoderParameters, part: &Partition, cfg: &PipelineConfig) -> Result<f64> {
    let sign = cfg.train.loss_config.softmax_sign;
    let mut rng = seeded_rng(cfg.train.seed, RngStream::References);
    let refs = build_reference_sets(params, &part.train, cfg.references, &mut rng)?;
    let dev = ScoreSet::from_scored(&score_split(params, &refs, &part.dev, sign)?);
    Ok(crate::eval::eer_threshold(&dev)?.eer)
}

/// Trains on the partition, honoring early stopping when configured.
pub fn train_partition(part: &Partition, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(&part.train, &cfg.train)?;
    let Some(patience) = cfg.early_stop_patience else {
        for _ in 0..cfg.train.epochs {
            trainer.run_epoch()?;
        }
        return Ok(trainer.into_outcome());
    };
    let mut best = (dev_aer(trainer.params(), part, cfg)?, trainer.params().clone());
    let mut stale = 0;
    for _ in 0..cfg.train.epochs {
        trainer.run_epoch()?;
        let aer = dev_aer(trainer.params(), part, cfg)?;
        if aer < best.0 {
            best = (aer, trainer.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    let mut outcome = trainer.into_outcome();
    outcome.params = best.1;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

pub fn run_protocol(bench: &Benchmark, spec: &ProtocolSpec, cfg: &PipelineConfig) -> Result<ProtocolRun> {
    let part = partition(bench, spec)?;
    let outcome = train_partition(&part, cfg)?;
    let evaluation = evaluate(&outcome.params, &part, cfg)?;
    Ok(ProtocolRun { outcome, evaluation })
}

/// The four rows of the loss/mining ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Class-wise triplet loss.
    Baseline,
    /// Triplet loss with genuine anchors.
    Model1,
    /// Triplet focal loss with genuine anchors.
    Model2,
    /// Anomaly loss with genuine anchors.
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Model1, Variant::Model2, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Model1 => "model-1",
            Variant::Model2 => "model-2",
            Variant::Ours => "ours",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Variant::Baseline | Variant::Model1 => LossKind::Triplet,
            Variant::Model2 => LossKind::TripletFocal,
            Variant::Ours => LossKind::Anomaly,
        }
    }

    pub fn mode(self) -> MiningMode {
        match self {
            Variant::Baseline => MiningMode::Classwise,
            _ => MiningMode::Anomaly,
        }
    }

    /// `base` with this variant's loss and mining mode; everything else,
    /// seed included, is shared.
    pub fn configure(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.train.loss = self.loss();
        cfg.train.mode = self.mode();
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub aer: f64,
    pub far: f64,
    pub frr: f64,
    pub delta_aer: f64,
}

/// Relative AER improvement over the baseline, zero when the baseline is
/// already perfect.
pub fn delta_aer(baseline: f64, aer: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - aer) / baseline
    }
}

/// Trains and evaluates every variant on the same partition and seed.
pub fn run_ablation(bench: &Benchmark, spec: &ProtocolSpec, base: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let part = partition(bench, spec)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let cfg = v.configure(base);
        let outcome = train_partition(&part, &cfg)?;
        let r = evaluate(&outcome.params, &part, &cfg)?.report;
        rows.push(AblationRow {
            variant: v,
            aer: r.aer,
            far: r.dev_far,
            frr: r.dev_frr,
            delta_aer: 0.0,
        });
    }
    let base_aer = rows[0].aer;
    for r in &mut rows {
        r.delta_aer = delta_aer(base_aer, r.aer);
    }
    Ok(rows)
}
