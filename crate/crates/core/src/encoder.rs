//! MLP encoder `R^N → R^D` with a unit-norm output, its backward pass and SGD
//! with classical momentum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, Embedding, ZERO_NORM};
use crate::{Error, Result};

/// Layer sizes of the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderShape {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        EncoderShape {
            input_dim,
            hidden,
            output_dim,
        }
    }

    /// `[64, 64]` hidden units and a 32-dimensional embedding.
    pub fn default_for(input_dim: usize) -> Self {
        EncoderShape::new(input_dim, vec![64, 64], 32)
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims
    }
}

/// One affine layer; `weights` is row-major with shape `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Encoder weights. Hidden layers use a ReLU; the last layer is affine and
/// its output is normalized to unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParameters {
    pub layers: Vec<Layer>,
}

impl EncoderParameters {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        let dims = shape.dims();
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::InvalidConfig(format!(
                "encoder layer sizes must be positive, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let mut layer = Layer::zeros(fan_in, fan_out);
                for x in layer.weights.iter_mut() {
                    *x = rng.random_range(-limit..limit);
                }
                layer
            })
            .collect();
        Ok(EncoderParameters { layers })
    }

    /// Single square identity layer with zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut layer = Layer::zeros(dim, dim);
        for i in 0..dim {
            layer.weights[i * dim + i] = 1.0;
        }
        EncoderParameters {
            layers: vec![layer],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Checks that layer sizes chain and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("encoder has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::ShapeMismatch(format!("layer {i} buffers do not match its shape")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.inputs,
                    i - 1,
                    self.layers[i - 1].outputs
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Embedding> {
        forward(self, features)
    }

    pub fn embed_all<'a, I>(&self, inputs: I) -> Result<Vec<Embedding>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        inputs.into_iter().map(|x| forward(self, x)).collect()
    }
}

struct Trace {
    /// Input to each layer.
    activations: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last one is the pre-norm vector.
    pre: Vec<Vec<f64>>,
}

fn trace(params: &EncoderParameters, features: &[f64]) -> Result<Trace> {
    if features.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: features.len(),
        });
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut x = features.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&x);
        activations.push(x);
        x = if i < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
    }
    Ok(Trace { activations, pre })
}

pub fn forward(params: &EncoderParameters, features: &[f64]) -> Result<Embedding> {
    if params.layers.is_empty() {
        return Err(Error::ShapeMismatch("encoder has no layers".into()));
    }
    let t = trace(params, features)?;
    normalize(t.pre.last().expect("at least one layer"))
}

/// Parameter-shaped buffer used for gradients and momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParameters) -> Self {
        Gradients {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn matches(&self, params: &EncoderParameters) -> bool {
        self.weights.len() == params.layers.len()
            && self.biases.len() == params.layers.len()
            && params.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.bias.len()
            })
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|x| *x == 0.0)
    }

    /// Euclidean norm over every weight and bias.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.weights.iter().chain(&self.biases).flatten().map(|x| x * x).sum())
    }

    /// Rescales to norm at most `max_norm` and returns the norm before
    /// clipping. Non-finite gradients are left for the optimizer to reject.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n.is_finite() && n > max_norm {
            let k = max_norm / n;
            self.weights.iter_mut().chain(&mut self.biases).flatten().for_each(|x| *x *= k);
        }
        n
    }
}

/// Gradient of `Σ_i ⟨upstream_i, f(x_i)⟩` with respect to every weight and bias.
///
/// The chain rule runs through the unit normalization,
/// `g ↦ (g − (g·u)u) / ‖v‖` for pre-norm output `v` and `u = v / ‖v‖`, and then
/// back through the layers. ReLU has derivative zero at the kink.
pub fn backward(params: &EncoderParameters, batch: &[&[f64]], upstream: &[Vec<f64>]) -> Result<Gradients> {
    if batch.len() != upstream.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} upstream gradients",
            batch.len(),
            upstream.len()
        )));
    }
    if params.layers.is_empty() {
        return Err(Error::ShapeMismatch("encoder has no layers".into()));
    }
    let out_dim = params.output_dim();
    let mut grads = Gradients::zeros_like(params);
    for (x, g) in batch.iter().zip(upstream) {
        if g.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: out_dim,
                found: g.len(),
            });
        }
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let t = trace(params, x)?;
        let v = t.pre.last().expect("at least one layer");
        let norm = libm::sqrt(v.iter().map(|a| a * a).sum());
        if !(norm >= ZERO_NORM) {
            return Err(Error::ZeroVector);
        }
        let gu: f64 = g.iter().zip(v).map(|(gi, vi)| gi * vi / norm).sum();
        let mut delta: Vec<f64> = g
            .iter()
            .zip(v)
            .map(|(gi, vi)| (gi - gu * vi / norm) / norm)
            .collect();
        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let input = &t.activations[l];
            let gw = &mut grads.weights[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grads.biases[l][o] += d;
                for (w, a) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let below = &t.pre[l - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            for (n, z) in next.iter_mut().zip(below) {
                if *z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// Momentum buffers and counters of SGD with classical momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Gradients,
    pub learning_rate: f64,
    pub momentum: f64,
    pub step: u64,
    pub epoch: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParameters, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            velocity: Gradients::zeros_like(params),
            learning_rate,
            momentum,
            step: 0,
            epoch: 0,
        }
    }
}

/// `v ← μ·v − lr·g; p ← p + v`.
///
/// A non-finite gradient aborts the step before any parameter changes.
pub fn sgd_momentum_step(
    params: &mut EncoderParameters,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.matches(params) || !state.velocity.matches(params) {
        return Err(Error::ShapeMismatch(
            "gradient or velocity buffers do not mirror the parameters".into(),
        ));
    }
    for (l, (gw, gb)) in grads.weights.iter().zip(&grads.biases).enumerate() {
        if gw.iter().chain(gb).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: l });
        }
    }
    let (mu, lr) = (state.momentum, state.learning_rate);
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let pairs = layer
            .weights
            .iter_mut()
            .zip(state.velocity.weights[l].iter_mut().zip(&grads.weights[l]))
            .chain(
                layer
                    .bias
                    .iter_mut()
                    .zip(state.velocity.biases[l].iter_mut().zip(&grads.biases[l])),
            );
        for (p, (v, g)) in pairs {
            *v = mu * *v - lr * g;
            *p += *v;
        }
    }
    state.step += 1;
    Ok(())
}
