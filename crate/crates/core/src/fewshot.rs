//! Classifier-free decision scores from a handful of genuine and attack
//! reference embeddings.
//!
//! A probe is scored against `M` positional pairs `(g_i, h_i)` by
//! accumulating one two-way softmax over distances per pair. No classifier is
//! trained on top of the embeddings.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{sq_dist, Embedding, Label, PaiType, Sample};
use crate::encoder::EncoderParameters;
use crate::losses::{sigmoid, SoftmaxSign};
use crate::{Error, Result};

/// Default number of reference pairs.
pub const DEFAULT_PAIRS: usize = 3;

/// Genuine and attack references, paired positionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSets {
    pub genuine: Vec<Embedding>,
    pub attacks: Vec<Embedding>,
    /// Sample ids of the references, in pairing order.
    pub genuine_ids: Vec<String>,
    pub attack_ids: Vec<String>,
    /// Instrument type of each attack reference.
    pub attack_types: Vec<PaiType>,
}

impl ReferenceSets {
    pub fn pairs(&self) -> usize {
        self.genuine.len().min(self.attacks.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs() == 0 {
            return Err(Error::InsufficientSamples {
                what: "reference pairs".into(),
                required: 1,
                available: 0,
            });
        }
        Ok(())
    }
}

/// Draws `m` genuine and `m` attack references without replacement and embeds
/// them.
///
/// Attack references cycle over instrument types in taxonomy order and,
/// within a type, over domain tags, so that `m = 3` over three types yields
/// one reference per type.
pub fn build_reference_sets<R: Rng + ?Sized>(
    encoder: &EncoderParameters,
    samples: &[Sample],
    m: usize,
    rng: &mut R,
) -> Result<ReferenceSets> {
    if m == 0 {
        return Err(Error::InvalidConfig("the number of reference pairs must be at least 1".into()));
    }
    let mut genuine: Vec<&Sample> = samples.iter().filter(|s| s.label.is_genuine()).collect();
    let attack_count = samples.len() - genuine.len();
    if genuine.len() < m {
        return Err(Error::InsufficientSamples {
            what: "genuine reference samples".into(),
            required: m,
            available: genuine.len(),
        });
    }
    if attack_count < m {
        return Err(Error::InsufficientSamples {
            what: "attack reference samples".into(),
            required: m,
            available: attack_count,
        });
    }
    genuine.shuffle(rng);
    genuine.truncate(m);

    // type → domain → shuffled members
    let mut groups: BTreeMap<PaiType, BTreeMap<&str, Vec<&Sample>>> = BTreeMap::new();
    for s in samples {
        if let Label::Attack { pai_type, .. } = &s.label {
            groups
                .entry(*pai_type)
                .or_default()
                .entry(s.domain_tag.as_str())
                .or_default()
                .push(s);
        }
    }
    let mut queues: Vec<Vec<&Sample>> = Vec::new();
    for domains in groups.values_mut() {
        let mut lanes: Vec<Vec<&Sample>> = domains
            .values_mut()
            .map(|members| {
                members.shuffle(rng);
                core::mem::take(members)
            })
            .collect();
        let mut queue = Vec::new();
        let longest = lanes.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..longest {
            for lane in &mut lanes {
                if let Some(s) = lane.get(k) {
                    queue.push(*s);
                }
            }
        }
        queue.reverse();
        queues.push(queue);
    }
    let mut attacks = Vec::with_capacity(m);
    while attacks.len() < m {
        for q in queues.iter_mut() {
            if attacks.len() == m {
                break;
            }
            if let Some(s) = q.pop() {
                attacks.push(s);
            }
        }
    }

    let embed = |set: &[&Sample]| -> Result<Vec<Embedding>> {
        set.iter().map(|s| encoder.forward(&s.features)).collect()
    };
    Ok(ReferenceSets {
        genuine: embed(&genuine)?,
        attacks: embed(&attacks)?,
        genuine_ids: genuine.iter().map(|s| s.id.clone()).collect(),
        attack_ids: attacks.iter().map(|s| s.id.clone()).collect(),
        attack_types: attacks.iter().filter_map(|s| s.label.pai_type()).collect(),
    })
}

/// Normalized score in `[0, 1]` and the raw accumulated sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub score: f64,
    pub raw: f64,
}

/// One pair's softmax term.
///
/// `PaperLiteral` evaluates `e^{D_tg} / (e^{D_tg} + e^{D_th})`; `Corrected`
/// swaps numerator roles, `e^{D_th} / (e^{D_tg} + e^{D_th})`, so that being
/// close to the genuine reference raises the score.
pub fn pair_term(d_tg: f64, d_th: f64, sign: SoftmaxSign) -> f64 {
    match sign {
        SoftmaxSign::PaperLiteral => sigmoid(d_tg - d_th),
        SoftmaxSign::Corrected => sigmoid(d_th - d_tg),
    }
}

pub fn posterior_score(probe: &Embedding, refs: &ReferenceSets, sign: SoftmaxSign) -> Posterior {
    let m = refs.pairs();
    let raw: f64 = refs
        .genuine
        .iter()
        .zip(&refs.attacks)
        .map(|(g, h)| {
            pair_term(
                sq_dist(probe.as_slice(), g.as_slice()),
                sq_dist(probe.as_slice(), h.as_slice()),
                sign,
            )
        })
        .sum();
    Posterior {
        score: if m == 0 { 0.0 } else { raw / m as f64 },
        raw,
    }
}

/// A scored sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub raw_score: f64,
    pub label: Label,
}

/// Scores every sample in order.
pub fn score_split(
    encoder: &EncoderParameters,
    refs: &ReferenceSets,
    samples: &[Sample],
    sign: SoftmaxSign,
) -> Result<Vec<ScoredSample>> {
    refs.validate()?;
    samples
        .iter()
        .map(|s| {
            let e = encoder.forward(&s.features)?;
            let p = posterior_score(&e, refs, sign);
            Ok(ScoredSample {
                id: s.id.clone(),
                score: p.score,
                raw_score: p.raw,
                label: s.label.clone(),
            })
        })
        .collect()
}
