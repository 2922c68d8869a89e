//! Samples, labels, embeddings and the squared Euclidean distance every loss
//! consumes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Norms below this are treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Absolute tolerance of the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// First tier of the presentation attack instrument taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaiType {
    Print,
    Replay,
    Mask,
}

impl PaiType {
    pub const ALL: [PaiType; 3] = [PaiType::Print, PaiType::Replay, PaiType::Mask];

    pub fn as_str(self) -> &'static str {
        match self {
            PaiType::Print => "print",
            PaiType::Replay => "replay",
            PaiType::Mask => "mask",
        }
    }

    /// Second-tier subtypes allowed under this type.
    pub fn subtypes(self) -> &'static [&'static str] {
        match self {
            PaiType::Print | PaiType::Replay => &["low", "medium", "high"],
            PaiType::Mask => &["paper", "rigid", "silicone"],
        }
    }

    fn index(self) -> u32 {
        match self {
            PaiType::Print => 0,
            PaiType::Replay => 1,
            PaiType::Mask => 2,
        }
    }
}

impl fmt::Display for PaiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaiType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "print" => Ok(PaiType::Print),
            "replay" => Ok(PaiType::Replay),
            "mask" => Ok(PaiType::Mask),
            other => Err(Error::InvalidLabel(format!(
                "unknown pai_type {other:?}; allowed values: print, replay, mask"
            ))),
        }
    }
}

/// Two-level sample label: genuine, or an attack with its instrument type and
/// subtype.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Genuine,
    Attack { pai_type: PaiType, pai_subtype: String },
}

/// Number of leaf classes in the taxonomy, genuine included.
pub const CLASS_COUNT: u32 = 10;

impl Label {
    /// Builds an attack label, checking the subtype against the taxonomy.
    pub fn attack(pai_type: PaiType, pai_subtype: &str) -> Result<Self> {
        let label = Label::Attack {
            pai_type,
            pai_subtype: pai_subtype.to_string(),
        };
        label.validate()?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Label::Genuine => Ok(()),
            Label::Attack {
                pai_type,
                pai_subtype,
            } => {
                if pai_type.subtypes().contains(&pai_subtype.as_str()) {
                    Ok(())
                } else {
                    Err(Error::InvalidLabel(format!(
                        "subtype {pai_subtype:?} is not declared for {pai_type}; allowed values: {}",
                        pai_type.subtypes().join(", ")
                    )))
                }
            }
        }
    }

    pub fn is_genuine(&self) -> bool {
        matches!(self, Label::Genuine)
    }

    pub fn pai_type(&self) -> Option<PaiType> {
        match self {
            Label::Genuine => None,
            Label::Attack { pai_type, .. } => Some(*pai_type),
        }
    }

    pub fn pai_subtype(&self) -> Option<&str> {
        match self {
            Label::Genuine => None,
            Label::Attack { pai_subtype, .. } => Some(pai_subtype),
        }
    }

    /// Leaf class index: 0 for genuine, 1..=9 for the nine attack leaves.
    ///
    /// Only meaningful for validated labels.
    pub fn class_index(&self) -> u32 {
        match self {
            Label::Genuine => 0,
            Label::Attack {
                pai_type,
                pai_subtype,
            } => {
                let sub = pai_type
                    .subtypes()
                    .iter()
                    .position(|s| *s == pai_subtype.as_str())
                    .unwrap_or(0) as u32;
                1 + pai_type.index() * 3 + sub
            }
        }
    }

    /// Short class name such as `genuine` or `replay/high`.
    pub fn class_name(&self) -> String {
        match self {
            Label::Genuine => "genuine".to_string(),
            Label::Attack {
                pai_type,
                pai_subtype,
            } => format!("{pai_type}/{pai_subtype}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidLabel(format!(
                "unknown split {other:?}; allowed values: train, dev, test"
            ))),
        }
    }
}

/// A labelled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: Label,
    /// Dataset of origin, used by cross-domain protocols.
    pub domain_tag: String,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.features.len() != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                found: self.features.len(),
            });
        }
        if let Some(k) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidLabel(format!(
                "sample {} has a non-finite feature at index {k}",
                self.id
            )));
        }
        self.label.validate()
    }
}

/// An encoder output.
///
/// Embeddings built with [`normalize`] have unit norm; losses also accept
/// arbitrary vectors so gradients can be probed off the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps raw values without normalizing them.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|x| x * x).sum())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Indices of an (anchor, positive, negative) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Triplet {
            anchor,
            positive,
            negative,
        }
    }

    pub fn is_distinct(&self) -> bool {
        self.anchor != self.positive && self.anchor != self.negative && self.positive != self.negative
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance. No square root is ever taken.
pub fn squared_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(sq_dist(&a.0, &b.0))
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Embedding> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    if !(norm >= ZERO_NORM) || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

/// Dense symmetric matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distances(batch: &[Embedding]) -> Result<DistanceMatrix> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let dim = first.dim();
    if let Some(bad) = batch.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let n = batch.len();
    let mut data = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&batch[i].0, &batch[j].0);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}
