//! Metric-learning losses with analytic gradients with respect to the
//! embeddings.
//!
//! Every loss takes a table of embeddings plus index tuples into it, and
//! returns the summed loss together with one gradient vector per table row.
//! Distances are squared Euclidean throughout. Hinges use a sub-gradient of
//! zero at the kink.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embedding::{sq_dist, Embedding, Triplet};
use crate::{Error, Result};

/// Sign convention of the softmax over distances.
///
/// `PaperLiteral` puts the anchor-positive (or probe-genuine) distance in the
/// numerator; minimizing that form pushes genuine pairs apart. `Corrected`
/// swaps the roles so that the loss falls as negatives move away.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSign {
    PaperLiteral,
    #[default]
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    /// Strength of the exponential kernel of the focal triplet loss.
    pub sigma: f64,
    /// Weight of the triplet focal term in the anomaly loss.
    pub lambda: f64,
    pub softmax_sign: SoftmaxSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            sigma: 0.3,
            lambda: 1.0,
            softmax_sign: SoftmaxSign::Corrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidConfig(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to each row of the embedding
/// table the loss was evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradients: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(rows: usize, dim: usize) -> Self {
        LossOutput {
            value: 0.0,
            gradients: vec![vec![0.0; dim]; rows],
        }
    }

    /// `self + weight * other`, on value and gradients alike.
    pub fn add_scaled(mut self, other: &LossOutput, weight: f64) -> Self {
        self.value += weight * other.value;
        for (g, h) in self.gradients.iter_mut().zip(&other.gradients) {
            for (x, y) in g.iter_mut().zip(h) {
                *x += weight * y;
            }
        }
        self
    }

    /// Adds `coef * (x - y)` to row `i`.
    fn accumulate(&mut self, i: usize, x: &[f64], y: &[f64], coef: f64) {
        for ((g, a), b) in self.gradients[i].iter_mut().zip(x).zip(y) {
            *g += coef * (a - b);
        }
    }

    fn add_triplet_grad(&mut self, table: &[Embedding], t: &Triplet, w_ap: f64, w_an: f64) {
        // d D_ap / d a = 2(a - p), d D_ap / d p = -2(a - p); same for D_an with n.
        let a = table[t.anchor].as_slice();
        let p = table[t.positive].as_slice();
        let n = table[t.negative].as_slice();
        self.accumulate(t.anchor, a, p, 2.0 * w_ap);
        self.accumulate(t.positive, a, p, -2.0 * w_ap);
        self.accumulate(t.anchor, a, n, 2.0 * w_an);
        self.accumulate(t.negative, a, n, -2.0 * w_an);
    }
}

fn table_dim(table: &[Embedding]) -> Result<usize> {
    let dim = table.first().map(Embedding::dim).unwrap_or(0);
    if let Some(bad) = table.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    Ok(dim)
}

fn check_index(table: &[Embedding], i: usize) -> Result<()> {
    if i < table.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "index {i} out of range for {} embeddings",
            table.len()
        )))
    }
}

fn check_triplets(table: &[Embedding], triplets: &[Triplet]) -> Result<usize> {
    let dim = table_dim(table)?;
    for t in triplets {
        check_index(table, t.anchor)?;
        check_index(table, t.positive)?;
        check_index(table, t.negative)?;
    }
    Ok(dim)
}

fn triplet_distances(table: &[Embedding], t: &Triplet) -> (f64, f64) {
    let a = table[t.anchor].as_slice();
    (
        sq_dist(a, table[t.positive].as_slice()),
        sq_dist(a, table[t.negative].as_slice()),
    )
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Logistic function `1 / (1 + e^{-x})` without overflow.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Class centers for the center loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    pub centers: BTreeMap<u32, Vec<f64>>,
    /// Step toward the batch mean, in (0, 1].
    pub update_rate: f64,
}

impl ClassCenters {
    pub fn new(update_rate: f64) -> Result<Self> {
        if !(update_rate > 0.0 && update_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "center update rate must lie in (0, 1], got {update_rate}"
            )));
        }
        Ok(ClassCenters {
            centers: BTreeMap::new(),
            update_rate,
        })
    }
}

impl Default for ClassCenters {
    fn default() -> Self {
        ClassCenters {
            centers: BTreeMap::new(),
            update_rate: 0.5,
        }
    }
}

/// `½ Σ ‖f_i − c_{y_i}‖²`.
pub fn center_loss(table: &[Embedding], classes: &[u32], centers: &ClassCenters) -> Result<LossOutput> {
    let dim = table_dim(table)?;
    if classes.len() != table.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings but {} class ids",
            table.len(),
            classes.len()
        )));
    }
    let mut out = LossOutput::zeros(table.len(), dim);
    for (i, (f, class)) in table.iter().zip(classes).enumerate() {
        let c = centers.centers.get(class).ok_or(Error::UnknownClass(*class))?;
        if c.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: c.len(),
            });
        }
        out.value += 0.5 * sq_dist(f.as_slice(), c);
        out.accumulate(i, f.as_slice(), c, 1.0);
    }
    Ok(out)
}

/// Moves each observed class center toward its batch members:
/// `c ← c − α·mean(c − f_i)`. Classes without a center yet start at their
/// batch mean; unobserved centers are left untouched.
pub fn update_centers(
    centers: &ClassCenters,
    table: &[Embedding],
    classes: &[u32],
) -> Result<ClassCenters> {
    let dim = table_dim(table)?;
    if table.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, class) in table.iter().zip(classes) {
        let entry = sums.entry(*class).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, x) in entry.0.iter_mut().zip(f.as_slice()) {
            *s += x;
        }
        entry.1 += 1;
    }
    let mut next = centers.clone();
    let alpha = centers.update_rate;
    for (class, (sum, count)) in sums {
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        match next.centers.get_mut(&class) {
            Some(c) => {
                for (ci, mi) in c.iter_mut().zip(&mean) {
                    // mean(c - f_i) = c - mean(f_i)
                    *ci -= alpha * (*ci - mi);
                }
            }
            None => {
                next.centers.insert(class, mean);
            }
        }
    }
    Ok(next)
}

/// A pair of table rows for the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub positive: bool,
}

/// `Σ y·D + (1 − y)·max(0, m − D)²`, with the margin applied to the squared
/// distance.
pub fn contrastive_loss(table: &[Embedding], pairs: &[Pair], margin: f64) -> Result<LossOutput> {
    let dim = table_dim(table)?;
    let mut out = LossOutput::zeros(table.len(), dim);
    for pair in pairs {
        check_index(table, pair.first)?;
        check_index(table, pair.second)?;
        let x = table[pair.first].as_slice();
        let y = table[pair.second].as_slice();
        let d = sq_dist(x, y);
        let dl_dd = if pair.positive {
            out.value += d;
            1.0
        } else {
            let gap = margin - d;
            if gap > 0.0 {
                out.value += gap * gap;
                -2.0 * gap
            } else {
                0.0
            }
        };
        if dl_dd != 0.0 {
            out.accumulate(pair.first, x, y, 2.0 * dl_dd);
            out.accumulate(pair.second, x, y, -2.0 * dl_dd);
        }
    }
    Ok(out)
}

/// Per-triplet hinge `max(0, D_ap − D_an + m)`.
pub fn triplet_term(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

pub fn triplet_loss(table: &[Embedding], triplets: &[Triplet], margin: f64) -> Result<LossOutput> {
    let dim = check_triplets(table, triplets)?;
    let mut out = LossOutput::zeros(table.len(), dim);
    for t in triplets {
        let (d_ap, d_an) = triplet_distances(table, t);
        let h = d_ap - d_an + margin;
        if h > 0.0 {
            out.value += h;
            out.add_triplet_grad(table, t, 1.0, -1.0);
        }
    }
    Ok(out)
}

/// Per-triplet focal hinge `max(0, e^{D_ap/σ} − e^{D_an/σ} + m)`.
///
/// The exponential difference is taken as a difference of `expm1` values so
/// that it stays accurate when both distances are tiny relative to `σ`.
pub fn triplet_focal_term(d_ap: f64, d_an: f64, margin: f64, sigma: f64) -> f64 {
    (libm::expm1(d_ap / sigma) - libm::expm1(d_an / sigma) + margin).max(0.0)
}

pub fn triplet_focal_loss(
    table: &[Embedding],
    triplets: &[Triplet],
    margin: f64,
    sigma: f64,
) -> Result<LossOutput> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
    }
    let dim = check_triplets(table, triplets)?;
    let mut out = LossOutput::zeros(table.len(), dim);
    for t in triplets {
        let (d_ap, d_an) = triplet_distances(table, t);
        let h = libm::expm1(d_ap / sigma) - libm::expm1(d_an / sigma) + margin;
        if h > 0.0 {
            out.value += h;
            let w_ap = libm::exp(d_ap / sigma) / sigma;
            let w_an = -libm::exp(d_an / sigma) / sigma;
            out.add_triplet_grad(table, t, w_ap, w_an);
        }
    }
    Ok(out)
}

/// Per-triplet metric-softmax term as a negative log-probability.
///
/// `PaperLiteral`: `−log(e^{D_ap} / (e^{D_ap} + e^{D_an})) = log(1 + e^{D_an − D_ap})`.
/// `Corrected`: `log(1 + e^{D_ap − D_an})`.
pub fn metric_softmax_term(d_ap: f64, d_an: f64, sign: SoftmaxSign) -> f64 {
    match sign {
        SoftmaxSign::PaperLiteral => softplus(d_an - d_ap),
        SoftmaxSign::Corrected => softplus(d_ap - d_an),
    }
}

pub fn metric_softmax_loss(
    table: &[Embedding],
    triplets: &[Triplet],
    sign: SoftmaxSign,
) -> Result<LossOutput> {
    let dim = check_triplets(table, triplets)?;
    let mut out = LossOutput::zeros(table.len(), dim);
    for t in triplets {
        let (d_ap, d_an) = triplet_distances(table, t);
        out.value += metric_softmax_term(d_ap, d_an, sign);
        // d softplus(x)/dx = sigmoid(x)
        let w_ap = match sign {
            SoftmaxSign::PaperLiteral => -sigmoid(d_an - d_ap),
            SoftmaxSign::Corrected => sigmoid(d_ap - d_an),
        };
        out.add_triplet_grad(table, t, w_ap, -w_ap);
    }
    Ok(out)
}

/// Metric-softmax regularized by the triplet focal loss:
/// `L = L_metric_soft + λ·L_tf`.
pub fn anomaly_loss(table: &[Embedding], triplets: &[Triplet], cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let soft = metric_softmax_loss(table, triplets, cfg.softmax_sign)?;
    let focal = triplet_focal_loss(table, triplets, cfg.margin, cfg.sigma)?;
    Ok(soft.add_scaled(&focal, cfg.lambda))
}

/// Compares an analytic gradient against central differences.
///
/// Each coordinate of `point` is perturbed by `±eps`; the result is the
/// largest `|analytic − numeric| / max(1e-8, |numeric|)` over coordinates.
pub fn finite_difference_check<F>(loss: F, point: &[Vec<f64>], analytic: &[Vec<f64>], eps: f64) -> f64
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut probe: Vec<Vec<f64>> = point.to_vec();
    let mut worst = 0.0f64;
    for (row, grads) in analytic.iter().enumerate().take(point.len()) {
        for (k, analytic_k) in grads.iter().enumerate().take(point[row].len()) {
            let x = point[row][k];
            probe[row][k] = x + eps;
            let up = loss(&probe);
            probe[row][k] = x - eps;
            let down = loss(&probe);
            probe[row][k] = x;
            let numeric = (up - down) / (2.0 * eps);
            let err = libm::fabs(analytic_k - numeric) / libm::fabs(numeric).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}
