//! Presentation attack detection metrics.
//!
//! Scores are oriented so that higher means more genuine. At a threshold `τ`
//! a sample is accepted when its score is `≥ τ`: attacks accepted count
//! toward FAR, genuine samples rejected toward FRR. The operating threshold is
//! the EER point on the development split and is then applied unchanged to
//! the test split.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embedding::{sq_dist, Embedding, Label, PaiType};
use crate::fewshot::{ReferenceSets, ScoredSample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub score: f64,
    pub raw_score: f64,
    pub genuine: bool,
    pub pai_type: Option<PaiType>,
    pub pai_subtype: Option<String>,
}

impl From<&ScoredSample> for ScoreEntry {
    fn from(s: &ScoredSample) -> Self {
        ScoreEntry {
            id: s.id.clone(),
            score: s.score,
            raw_score: s.raw_score,
            genuine: s.label.is_genuine(),
            pai_type: s.label.pai_type(),
            pai_subtype: s.label.pai_subtype().map(ToString::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
    pub higher_is_genuine: bool,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        ScoreSet {
            entries,
            higher_is_genuine: true,
        }
    }

    pub fn from_scored(scored: &[ScoredSample]) -> Self {
        ScoreSet::new(scored.iter().map(ScoreEntry::from).collect())
    }

    fn oriented(&self, e: &ScoreEntry) -> f64 {
        if self.higher_is_genuine {
            e.score
        } else {
            -e.score
        }
    }

    /// Number of (genuine, attack) entries.
    pub fn class_counts(&self) -> (usize, usize) {
        let g = self.entries.iter().filter(|e| e.genuine).count();
        (g, self.entries.len() - g)
    }

    fn validate(&self) -> Result<()> {
        if let Some(bad) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::InvalidLabel(alloc::format!("entry {} has a non-finite score", bad.id)));
        }
        let (g, a) = self.class_counts();
        if g == 0 || a == 0 {
            return Err(Error::OneClassScores);
        }
        Ok(())
    }
}

/// Error rates at one threshold, with the counts they come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub far: f64,
    pub frr: f64,
    pub false_accepts: usize,
    pub attacks: usize,
    pub false_rejects: usize,
    pub genuine: usize,
}

impl Rates {
    fn from_counts(false_accepts: usize, attacks: usize, false_rejects: usize, genuine: usize) -> Self {
        Rates {
            far: false_accepts as f64 / attacks as f64,
            frr: false_rejects as f64 / genuine as f64,
            false_accepts,
            attacks,
            false_rejects,
            genuine,
        }
    }

    pub fn hter(&self) -> f64 {
        (self.far + self.frr) / 2.0
    }
}

pub fn rates_at_threshold(scores: &ScoreSet, threshold: f64) -> Result<Rates> {
    scores.validate()?;
    let (mut fa, mut na, mut fr, mut ng) = (0, 0, 0, 0);
    for e in &scores.entries {
        let accepted = scores.oriented(e) >= threshold;
        if e.genuine {
            ng += 1;
            fr += usize::from(!accepted);
        } else {
            na += 1;
            fa += usize::from(accepted);
        }
    }
    Ok(Rates::from_counts(fa, na, fr, ng))
}

/// The equal error rate operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub eer: f64,
    pub rates: Rates,
}

/// Sweeps `−∞`, every midpoint between consecutive distinct scores, and `+∞`.
///
/// The chosen threshold minimizes `|FAR − FRR|`, then `FAR + FRR`, then `τ`.
/// Comparisons are made on integer counts so ties are exact.
pub fn eer_threshold(scores: &ScoreSet) -> Result<EerPoint> {
    scores.validate()?;
    let mut sorted: Vec<(f64, bool)> = scores
        .entries
        .iter()
        .map(|e| (scores.oriented(e), e.genuine))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ng, na) = scores.class_counts();

    // At τ = −∞ every sample is accepted.
    let mut rejected_genuine = 0usize;
    let mut accepted_attacks = na;
    let key = |fa: usize, fr: usize| {
        let far = fa as u128 * ng as u128;
        let frr = fr as u128 * na as u128;
        (far.abs_diff(frr), far + frr)
    };
    let mut best = (key(accepted_attacks, rejected_genuine), f64::NEG_INFINITY, accepted_attacks, rejected_genuine);
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1 {
                rejected_genuine += 1;
            } else {
                accepted_attacks -= 1;
            }
            i += 1;
        }
        let tau = if i < sorted.len() {
            value + (sorted[i].0 - value) / 2.0
        } else {
            f64::INFINITY
        };
        let k = key(accepted_attacks, rejected_genuine);
        if k < best.0 {
            best = (k, tau, accepted_attacks, rejected_genuine);
        }
    }
    let (_, threshold, fa, fr) = best;
    let rates = Rates::from_counts(fa, na, fr, ng);
    Ok(EerPoint {
        threshold,
        eer: rates.hter(),
        rates,
    })
}

/// Grouping of attacks for APCER.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApcerGranularity {
    #[default]
    Type,
    /// `type/subtype`, falling back to the type when the subtype is unknown.
    Subtype,
}

fn attack_group(e: &ScoreEntry, granularity: ApcerGranularity) -> Result<String> {
    let t = e.pai_type.ok_or_else(|| Error::MissingPaiType(e.id.clone()))?;
    Ok(match (granularity, &e.pai_subtype) {
        (ApcerGranularity::Subtype, Some(sub)) => alloc::format!("{t}/{sub}"),
        _ => t.as_str().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Threshold fixed at the development EER point.
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub dev_eer: f64,
    pub dev_far: f64,
    pub dev_frr: f64,
    /// Average error rate on the development split at the threshold.
    pub aer: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub apcer: BTreeMap<String, f64>,
    pub apcer_max: f64,
    pub bpcer: f64,
    pub acer: f64,
    /// Fraction of each true class that falls on its correct side of the
    /// threshold: accepted for genuine, rejected for attack groups.
    pub tpr: BTreeMap<String, f64>,
    pub test_genuine: usize,
    pub test_attacks: usize,
}

pub fn pad_report(dev: &ScoreSet, test: &ScoreSet) -> Result<EvalReport> {
    pad_report_with(dev, test, ApcerGranularity::Type)
}

pub fn pad_report_with(dev: &ScoreSet, test: &ScoreSet, granularity: ApcerGranularity) -> Result<EvalReport> {
    let eer = eer_threshold(dev)?;
    let tau = eer.threshold;
    let rates = rates_at_threshold(test, tau)?;

    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for e in test.entries.iter().filter(|e| !e.genuine) {
        let accepted = test.oriented(e) >= tau;
        let slot = groups.entry(attack_group(e, granularity)?).or_insert((0, 0));
        slot.0 += usize::from(accepted);
        slot.1 += 1;
    }
    let apcer: BTreeMap<String, f64> = groups
        .iter()
        .map(|(k, (acc, n))| (k.clone(), *acc as f64 / *n as f64))
        .collect();
    let apcer_max = apcer.values().copied().fold(0.0, f64::max);
    let bpcer = rates.frr;

    let mut tpr: BTreeMap<String, f64> = apcer.iter().map(|(k, v)| (k.clone(), 1.0 - v)).collect();
    tpr.insert("genuine".to_string(), 1.0 - rates.frr);

    Ok(EvalReport {
        threshold: tau,
        dev_eer: eer.eer,
        dev_far: eer.rates.far,
        dev_frr: eer.rates.frr,
        aer: (eer.rates.far + eer.rates.frr) / 2.0,
        far: rates.far,
        frr: rates.frr,
        hter: (rates.far + rates.frr) / 2.0,
        apcer,
        apcer_max,
        bpcer,
        acer: (apcer_max + bpcer) / 2.0,
        tpr,
        test_genuine: rates.genuine,
        test_attacks: rates.attacks,
    })
}

/// Row-normalized confusion matrix of true class against nearest prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_classes: Vec<String>,
    pub predicted_classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub rates: Vec<Vec<f64>>,
}

fn class_of(label: &Label) -> String {
    match label.pai_type() {
        None => "genuine".to_string(),
        Some(t) => t.as_str().to_string(),
    }
}

/// Assigns each embedding to the nearest class prototype, where prototypes are
/// the mean genuine reference and the mean attack reference of each
/// instrument type present in `refs`.
pub fn confusion_matrix(samples: &[(Embedding, Label)], refs: &ReferenceSets) -> Result<ConfusionMatrix> {
    refs.validate()?;
    let dim = refs.genuine[0].dim();
    let mean = |members: &[&Embedding]| -> Vec<f64> {
        let mut m = alloc::vec![0.0; dim];
        for e in members {
            for (x, y) in m.iter_mut().zip(e.as_slice()) {
                *x += y;
            }
        }
        m.iter().map(|x| x / members.len() as f64).collect()
    };
    let mut prototypes: Vec<(String, Vec<f64>)> =
        alloc::vec![("genuine".to_string(), mean(&refs.genuine.iter().collect::<Vec<_>>()))];
    for t in PaiType::ALL {
        let members: Vec<&Embedding> = refs
            .attacks
            .iter()
            .zip(&refs.attack_types)
            .filter(|(_, at)| **at == t)
            .map(|(e, _)| e)
            .collect();
        if !members.is_empty() {
            prototypes.push((t.as_str().to_string(), mean(&members)));
        }
    }
    let mut rows: BTreeMap<(u8, String), Vec<usize>> = BTreeMap::new();
    for (e, label) in samples {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: e.dim(),
            });
        }
        let nearest = prototypes
            .iter()
            .enumerate()
            .map(|(k, (_, p))| (k, sq_dist(e.as_slice(), p)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0;
        let order = label.pai_type().map_or(0, |t| 1 + t as u8);
        rows.entry((order, class_of(label)))
            .or_insert_with(|| alloc::vec![0; prototypes.len()])[nearest] += 1;
    }
    let true_classes: Vec<String> = rows.keys().map(|(_, k)| k.clone()).collect();
    let counts: Vec<Vec<usize>> = rows.into_values().collect();
    let rates = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|c| *c as f64 / n as f64).collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        true_classes,
        predicted_classes: prototypes.into_iter().map(|(k, _)| k).collect(),
        counts,
        rates,
    })
}

/// Serializes non-finite thresholds as the strings `"inf"` / `"-inf"`.
pub mod extended_f64 {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    struct ExtVisitor;

    impl Visitor<'_> for ExtVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
            f.write_str("a number or one of \"inf\", \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ExtVisitor)
    }
}
