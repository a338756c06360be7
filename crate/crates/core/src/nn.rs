//! Small feedforward and convolutional networks trained from scratch.
//!
//! A [`Network`] is a [`ModelSpec`] (an ordered list of dense, conv2d and
//! activation layers) plus one flat parameter vector. Training uses
//! reverse-mode backpropagation over mini-batches and Adam. All arithmetic is
//! `f64` and single-threaded, so a seed fully determines the trained weights.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::GainTensor;
use crate::error::{ensure, Error, Result};
use crate::optim::{self, Association, LoadMatrix, NetworkConfig};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Linear => x,
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; the output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding that keeps the spatial size (extra row/column at the end).
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Cross-correlation over a `channels × height × width` input.
    Conv2d {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: Padding,
    },
    Activation {
        kind: Activation,
    },
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::Dense { inputs, outputs }
    }

    pub fn act(kind: Activation) -> Self {
        Layer::Activation { kind }
    }

    /// A 2×3 convolution.
    pub fn conv(channels: usize, height: usize, width: usize, filters: usize, padding: Padding) -> Self {
        Layer::Conv2d { channels, height, width, filters, kernel_h: 2, kernel_w: 3, padding }
    }

    fn conv_out(height: usize, width: usize, kh: usize, kw: usize, padding: Padding) -> (usize, usize) {
        match padding {
            Padding::Same => (height, width),
            Padding::Valid => ((height + 1).saturating_sub(kh), (width + 1).saturating_sub(kw)),
        }
    }

    /// Output width for an input of `input` values, or `None` if they don't compose.
    fn output_dim(&self, input: usize) -> Option<usize> {
        match *self {
            Layer::Dense { inputs, outputs } => (inputs == input).then_some(outputs),
            Layer::Conv2d { channels, height, width, filters, kernel_h, kernel_w, padding } => {
                if channels * height * width != input {
                    return None;
                }
                let (oh, ow) = Self::conv_out(height, width, kernel_h, kernel_w, padding);
                (oh > 0 && ow > 0).then_some(filters * oh * ow)
            }
            Layer::Activation { .. } => Some(input),
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            Layer::Conv2d { channels, filters, kernel_h, kernel_w, .. } => {
                filters * channels * kernel_h * kernel_w + filters
            }
            Layer::Activation { .. } => 0,
        }
    }
}

/// Ordered layer graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = Self { input_dim, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense stack: hidden layers with `hidden_act`, then the output layer with `output_act`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, output_act: Activation) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(Layer::dense(width, h));
            layers.push(Layer::act(hidden_act));
            width = h;
        }
        layers.push(Layer::dense(width, output));
        layers.push(Layer::act(output_act));
        Self { input_dim: input, layers }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, Shape, "input width must be positive");
        ensure!(!self.layers.is_empty(), Shape, "model has no layers");
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            width = layer
                .output_dim(width)
                .ok_or_else(|| Error::Shape(format!("layer {i} ({layer:?}) does not accept {width} inputs")))?;
            ensure!(width >= 1, Shape, "layer {i} produces no outputs");
        }
        Ok(())
    }

    /// Widths of the input and of every layer output.
    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.input_dim];
        for layer in &self.layers {
            let w = layer.output_dim(*out.last().unwrap()).unwrap_or(0);
            out.push(w);
        }
        out
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }
}

/// Architecture presets.
pub mod presets {
    use super::*;

    /// Single-link power net: five hidden layers of 300.
    pub fn sm1(n: usize) -> ModelSpec {
        ModelSpec::mlp(n, &[300; 5], n, Activation::Relu, Activation::LeakyRelu)
    }

    /// Subcarrier-assignment net: one hidden layer of 200, sigmoid scores.
    pub fn model_a(u: usize, n: usize) -> ModelSpec {
        ModelSpec::mlp(u * n, &[200], u * n, Activation::Relu, Activation::Sigmoid)
    }

    /// Power net over assigned gains: three hidden layers of 100.
    pub fn model_b(n: usize) -> ModelSpec {
        ModelSpec::mlp(n, &[100; 3], n, Activation::Relu, Activation::LeakyRelu)
    }

    /// Interference-channel power net.
    pub fn sm2b(b: usize) -> ModelSpec {
        ModelSpec::mlp(b * b, &[200, 80, 50], b, Activation::Relu, Activation::LeakyRelu)
    }

    /// Value estimator with three hidden layers of 128.
    pub fn dqn(state: usize, actions: usize) -> ModelSpec {
        ModelSpec::mlp(state, &[128; 3], actions, Activation::Relu, Activation::Linear)
    }

    /// Four same-padded 2×3 convolutions with `N` filters over a `B × U × N`
    /// gain image, then a dense sigmoid head with one output per slot.
    /// Input is `B × U × (N + 1)`: gains plus the load column.
    pub fn sm3_conv(b: usize, u: usize, n: usize) -> ModelSpec {
        let w = n + 1;
        let mut layers = Vec::new();
        let mut channels = b;
        for _ in 0..4 {
            layers.push(Layer::conv(channels, u, w, n, Padding::Same));
            layers.push(Layer::act(Activation::Relu));
            channels = n;
        }
        layers.push(Layer::dense(n * u * w, b * u * n));
        layers.push(Layer::act(Activation::Sigmoid));
        ModelSpec { input_dim: b * u * w, layers }
    }

    pub fn by_name(name: &str, u: usize, n: usize, b: usize) -> Result<ModelSpec> {
        Ok(match name {
            "sm1" => sm1(n),
            "model-a" => model_a(u, n),
            "model-b" => model_b(n),
            "sm2b" => sm2b(b),
            "sm3-conv" => sm3_conv(b, u, n),
            _ => return Err(Error::Unknown { kind: "preset", name: name.to_string() }),
        })
    }
}

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    Glorot,
    /// Uniform in `[0, 1)` divided by `fan_in`, zero biases.
    UniformFanIn,
}

/// A model and its parameters. Cloning gives an immutable snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

/// Cached layer outputs of one batch, for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Network {
    pub fn new(spec: ModelSpec, init: Init, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.num_params());
        for layer in &spec.layers {
            let (count, bias, fan_in, fan_out) = match *layer {
                Layer::Dense { inputs, outputs } => (inputs * outputs, outputs, inputs, outputs),
                Layer::Conv2d { channels, filters, kernel_h, kernel_w, .. } => {
                    let k = kernel_h * kernel_w;
                    (filters * channels * k, filters, channels * k, filters * k)
                }
                Layer::Activation { .. } => continue,
            };
            for _ in 0..count {
                let w = match init {
                    Init::Glorot => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        rng.gen_range(-limit..limit)
                    }
                    Init::UniformFanIn => rng.gen::<f64>() / fan_in as f64,
                };
                params.push(w);
            }
            params.extend(std::iter::repeat(0.0).take(bias));
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        ensure!(
            params.len() == spec.num_params(),
            Shape,
            "model needs {} parameters, got {}",
            spec.num_params(),
            params.len()
        );
        Ok(Self { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Forward pass over `batch` row-major inputs, keeping every layer output.
    pub fn forward_tape(&self, inputs: &[f64], batch: usize) -> Result<Tape> {
        ensure!(
            inputs.len() == batch * self.spec.input_dim,
            Shape,
            "expected {} inputs of width {}, got {} values",
            batch,
            self.spec.input_dim,
            inputs.len()
        );
        let widths = self.spec.widths();
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(inputs.to_vec());
        let mut offset = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = &acts[i];
            let mut y = vec![0.0; batch * widths[i + 1]];
            let p = &self.params[offset..offset + layer.num_params()];
            match *layer {
                Layer::Dense { inputs, outputs } => dense_forward(x, p, &mut y, batch, inputs, outputs),
                Layer::Conv2d { .. } => {
                    for s in 0..batch {
                        conv_forward(layer, &x[s * widths[i]..(s + 1) * widths[i]], p, &mut y[s * widths[i + 1]..(s + 1) * widths[i + 1]]);
                    }
                }
                Layer::Activation { kind } => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = kind.apply(v);
                    }
                }
            }
            offset += layer.num_params();
            acts.push(y);
        }
        Ok(Tape { batch, acts })
    }

    /// Outputs for `batch` row-major inputs.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward_tape(inputs, batch)?.acts.pop().unwrap())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    /// Accumulates the parameter gradient for output gradient `d_out` into `grad`.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) -> Result<()> {
        let batch = tape.batch;
        ensure!(grad.len() == self.params.len(), Shape, "gradient buffer has the wrong length");
        ensure!(d_out.len() == tape.output().len(), Shape, "output gradient has the wrong length");
        let widths = self.spec.widths();
        let mut offsets = Vec::with_capacity(self.spec.layers.len());
        let mut acc = 0;
        for layer in &self.spec.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        let mut delta = d_out.to_vec();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &tape.acts[i];
            let range = offsets[i]..offsets[i] + layer.num_params();
            let p = &self.params[range.clone()];
            let g = &mut grad[range];
            let mut d_in = if i > 0 { vec![0.0; batch * widths[i]] } else { Vec::new() };
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    dense_backward(x, p, &delta, g, (i > 0).then_some(&mut d_in[..]), batch, inputs, outputs)
                }
                Layer::Conv2d { .. } => {
                    for s in 0..batch {
                        let xs = &x[s * widths[i]..(s + 1) * widths[i]];
                        let ds = &delta[s * widths[i + 1]..(s + 1) * widths[i + 1]];
                        let dx = if i > 0 { Some(&mut d_in[s * widths[i]..(s + 1) * widths[i]]) } else { None };
                        conv_backward(layer, xs, p, ds, g, dx);
                    }
                }
                Layer::Activation { kind } => {
                    if i > 0 {
                        let y = &tape.acts[i + 1];
                        for j in 0..d_in.len() {
                            d_in[j] = delta[j] * kind.derivative(x[j], y[j]);
                        }
                    }
                }
            }
            if i == 0 {
                break;
            }
            delta = d_in;
        }
        Ok(())
    }

    /// Mean loss over a batch and its gradient (written into `grad`).
    pub fn loss_and_grad(
        &self,
        inputs: &[f64],
        targets: &[Target<'_>],
        loss: &LossSpec,
        grad: &mut [f64],
    ) -> Result<f64> {
        let batch = targets.len();
        ensure!(batch >= 1, Param, "batch must be nonempty");
        let tape = self.forward_tape(inputs, batch)?;
        let out_dim = self.output_dim();
        let mut d_out = vec![0.0; tape.output().len()];
        let mut total = 0.0;
        for (s, target) in targets.iter().enumerate() {
            let range = s * out_dim..(s + 1) * out_dim;
            total += loss.eval(&tape.output()[range.clone()], target, Some(&mut d_out[range]))?;
        }
        let scale = 1.0 / batch as f64;
        d_out.iter_mut().for_each(|d| *d *= scale);
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.backward(&tape, &d_out, grad)?;
        Ok(total * scale)
    }

    /// Mean loss over a set without gradients.
    pub fn mean_loss(&self, inputs: &[f64], targets: &[Target<'_>], loss: &LossSpec) -> Result<f64> {
        if targets.is_empty() {
            return Ok(0.0);
        }
        let out = self.forward_batch(inputs, targets.len())?;
        let d = self.output_dim();
        let mut total = 0.0;
        for (s, t) in targets.iter().enumerate() {
            total += loss.eval(&out[s * d..(s + 1) * d], t, None)?;
        }
        Ok(total / targets.len() as f64)
    }
}

fn dense_forward(x: &[f64], p: &[f64], y: &mut [f64], batch: usize, inputs: usize, outputs: usize) {
    let (w, b) = p.split_at(inputs * outputs);
    for s in 0..batch {
        y[s * outputs..(s + 1) * outputs].copy_from_slice(b);
    }
    if batch == 1 {
        // A matrix-vector product; dgemm's packing dominates at this size.
        for (o, row) in y.iter_mut().zip(w.chunks_exact(inputs)) {
            *o += dot(row, x);
        }
        return;
    }
    // y (batch × out) += x (batch × in) · wᵀ, with w stored out × in.
    unsafe {
        matrixmultiply::dgemm(
            batch, inputs, outputs,
            1.0,
            x.as_ptr(), inputs as isize, 1,
            w.as_ptr(), 1, inputs as isize,
            1.0,
            y.as_mut_ptr(), outputs as isize, 1,
        );
    }
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    p: &[f64],
    delta: &[f64],
    g: &mut [f64],
    d_in: Option<&mut [f64]>,
    batch: usize,
    inputs: usize,
    outputs: usize,
) {
    let (w, _) = p.split_at(inputs * outputs);
    let (gw, gb) = g.split_at_mut(inputs * outputs);
    // gw (out × in) += deltaᵀ · x
    unsafe {
        matrixmultiply::dgemm(
            outputs, batch, inputs,
            1.0,
            delta.as_ptr(), 1, outputs as isize,
            x.as_ptr(), inputs as isize, 1,
            1.0,
            gw.as_mut_ptr(), inputs as isize, 1,
        );
    }
    for s in 0..batch {
        for (o, gbo) in gb.iter_mut().enumerate() {
            *gbo += delta[s * outputs + o];
        }
    }
    if let Some(d_in) = d_in {
        // d_in (batch × in) = delta (batch × out) · w (out × in)
        unsafe {
            matrixmultiply::dgemm(
                batch, outputs, inputs,
                1.0,
                delta.as_ptr(), outputs as isize, 1,
                w.as_ptr(), inputs as isize, 1,
                0.0,
                d_in.as_mut_ptr(), inputs as isize, 1,
            );
        }
    }
}

/// Visits every (filter, output cell, input cell, weight) contribution of a conv layer.
#[inline]
fn conv_for_each(layer: &Layer, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let Layer::Conv2d { channels, height, width, filters, kernel_h, kernel_w, padding } = *layer else {
        return;
    };
    let (oh, ow) = Layer::conv_out(height, width, kernel_h, kernel_w, padding);
    let (top, left) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => ((kernel_h - 1) / 2, (kernel_w - 1) / 2),
    };
    for f in 0..filters {
        for i in 0..oh {
            for j in 0..ow {
                let out = (f * oh + i) * ow + j;
                for c in 0..channels {
                    for di in 0..kernel_h {
                        let r = (i + di) as isize - top as isize;
                        if r < 0 || r >= height as isize {
                            continue;
                        }
                        for dj in 0..kernel_w {
                            let col = (j + dj) as isize - left as isize;
                            if col < 0 || col >= width as isize {
                                continue;
                            }
                            let input = (c * height + r as usize) * width + col as usize;
                            let weight = ((f * channels + c) * kernel_h + di) * kernel_w + dj;
                            visit(f, out, input, weight);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(layer: &Layer, x: &[f64], p: &[f64], y: &mut [f64]) {
    let Layer::Conv2d { filters, .. } = *layer else { return };
    let bias_at = p.len() - filters;
    let per_filter = y.len() / filters;
    for (k, v) in y.iter_mut().enumerate() {
        *v = p[bias_at + k / per_filter];
    }
    conv_for_each(layer, |_, out, input, weight| y[out] += p[weight] * x[input]);
}

fn conv_backward(layer: &Layer, x: &[f64], p: &[f64], delta: &[f64], g: &mut [f64], mut d_in: Option<&mut [f64]>) {
    let Layer::Conv2d { filters, .. } = *layer else { return };
    let bias_at = p.len() - filters;
    let per_filter = delta.len() / filters;
    for (k, d) in delta.iter().enumerate() {
        g[bias_at + k / per_filter] += d;
    }
    conv_for_each(layer, |_, out, input, weight| {
        g[weight] += delta[out] * x[input];
        if let Some(dx) = d_in.as_deref_mut() {
            dx[input] += delta[out] * p[weight];
        }
    });
}

/// Per-sample context of the unsupervised multi-cell loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Sm3Context {
    pub gains: GainTensor,
    pub association: Association,
    pub alpha: LoadMatrix,
}

/// What a single output is compared against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Values(&'a [f64]),
    Sm3(&'a Sm3Context),
}

/// Loss functions. Power terms are measured in units of the budget, so
/// `p_max` is `1.0` when targets are fractions of the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossSpec {
    /// `Σ (ŷ - y)²` per sample.
    Mse,
    /// Binary cross-entropy summed over outputs.
    Bce,
    /// `Σ (ŷ - y)² + β Σ_b (Σ ŷ_b - P_max)²` with outputs split into `groups` equal BS blocks.
    PowerViolation { beta: f64, p_max: f64, groups: usize },
    /// `-rate(ŷ · P_max) + β Σ_b (Σ ŷ_b - 1)²` for outputs given as budget fractions;
    /// `Σ ŷ_b` runs over the links BS `b` serves.
    UnsupervisedSm3 { beta: f64, network: NetworkConfig },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::PowerViolation { beta, p_max, groups } => {
                ensure!(*beta >= 0.0 && *p_max > 0.0 && *groups >= 1, Param, "invalid power-violation loss");
            }
            LossSpec::UnsupervisedSm3 { beta, network } => {
                ensure!(*beta >= 0.0, Param, "beta must be nonnegative");
                network.validate()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Loss of one output; writes `∂loss/∂output` into `grad` when given.
    pub fn eval<'a>(&self, out: &[f64], target: &Target<'a>, mut grad: Option<&mut [f64]>) -> Result<f64> {
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN network output".into()));
        }
        let values = |t: &Target<'a>| target_values(t, out.len());
        match self {
            LossSpec::Mse => {
                let y = values(target)?;
                let mut total = 0.0;
                for i in 0..out.len() {
                    let d = out[i] - y[i];
                    total += d * d;
                    if let Some(g) = grad.as_deref_mut() {
                        g[i] = 2.0 * d;
                    }
                }
                Ok(total)
            }
            LossSpec::Bce => {
                let y = values(target)?;
                let mut total = 0.0;
                for i in 0..out.len() {
                    let p = out[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    total -= y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln();
                    if let Some(g) = grad.as_deref_mut() {
                        g[i] = if out[i] == p { -y[i] / p + (1.0 - y[i]) / (1.0 - p) } else { 0.0 };
                    }
                }
                Ok(total)
            }
            LossSpec::PowerViolation { beta, p_max, groups } => {
                let mut total = LossSpec::Mse.eval(out, target, grad.as_deref_mut())?;
                ensure!(out.len() % groups == 0, Shape, "{} outputs do not split into {groups} groups", out.len());
                let block = out.len() / groups;
                for b in 0..*groups {
                    let excess = out[b * block..(b + 1) * block].iter().sum::<f64>() - p_max;
                    total += beta * excess * excess;
                    if let Some(g) = grad.as_deref_mut() {
                        g[b * block..(b + 1) * block].iter_mut().for_each(|v| *v += 2.0 * beta * excess);
                    }
                }
                Ok(total)
            }
            LossSpec::UnsupervisedSm3 { beta, network } => {
                let Target::Sm3(ctx) = *target else {
                    return Err(Error::Config("the unsupervised loss needs channel contexts".into()));
                };
                ensure!(out.len() == network.slots(), Shape, "output does not cover every slot");
                let p: Vec<f64> = out.iter().map(|x| x * network.p_max).collect();
                let mut rate_grad = vec![0.0; p.len()];
                let rate = optim::sm3_rate_grad(
                    &ctx.gains,
                    &p,
                    &ctx.alpha,
                    &ctx.association,
                    network.sigma2,
                    grad.is_some().then_some(&mut rate_grad[..]),
                );
                let mut total = -rate;
                let n = network.num_subcarriers;
                for b in 0..network.num_bs {
                    let served = || ctx.association.users_of(b).flat_map(move |u| (0..n).map(move |k| (b * network.num_users + u) * n + k));
                    let excess = served().map(|i| out[i]).sum::<f64>() - 1.0;
                    total += beta * excess * excess;
                    if let Some(g) = grad.as_deref_mut() {
                        let block = network.num_users * n;
                        for i in b * block..(b + 1) * block {
                            g[i] = -rate_grad[i] * network.p_max;
                        }
                        for i in served() {
                            g[i] += 2.0 * beta * excess;
                        }
                    }
                }
                Ok(total)
            }
        }
    }
}

fn target_values<'a>(t: &Target<'a>, len: usize) -> Result<&'a [f64]> {
    match *t {
        Target::Values(v) if v.len() == len => Ok(v),
        Target::Values(v) => Err(Error::Shape(format!("target has {} values, output {len}", v.len()))),
        Target::Sm3(_) => Err(Error::Config("this loss needs value targets".into())),
    }
}

/// Scales each of `groups` equal blocks down uniformly so its sum is at most `cap`.
pub fn project_groups(out: &mut [f64], groups: usize, cap: f64) {
    let block = out.len() / groups.max(1);
    if block == 0 {
        return;
    }
    for chunk in out.chunks_mut(block) {
        for v in chunk.iter_mut() {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let total: f64 = chunk.iter().sum();
        if total > cap {
            let scale = cap / total;
            chunk.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Per-feature standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(inputs: &[f64], dim: usize) -> Result<Self> {
        ensure!(dim >= 1 && !inputs.is_empty() && inputs.len() % dim == 0, Shape, "inputs do not form rows of width {dim}");
        let rows = (inputs.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in inputs.chunks(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; dim];
        for row in inputs.chunks(dim) {
            for i in 0..dim {
                var[i] += (row[i] - mean[i]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| {
            let s = (v / rows).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, inputs: &mut [f64]) {
        let dim = self.mean.len();
        for row in inputs.chunks_mut(dim) {
            for i in 0..dim {
                row[i] = (row[i] - self.mean[i]) / self.std[i];
            }
        }
    }
}

/// Input rows with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values { data: Vec<f64>, dim: usize },
    Sm3(Vec<Sm3Context>),
}

impl TrainSet {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: Targets) -> Result<Self> {
        ensure!(input_dim >= 1 && inputs.len() % input_dim == 0, Shape, "inputs do not form rows of width {input_dim}");
        let rows = inputs.len() / input_dim;
        let target_rows = match &targets {
            Targets::Values { data, dim } => {
                ensure!(*dim >= 1 && data.len() % dim == 0, Shape, "targets do not form rows of width {dim}");
                data.len() / dim
            }
            Targets::Sm3(c) => c.len(),
        };
        ensure!(rows == target_rows, Shape, "{rows} input rows but {target_rows} targets");
        Ok(Self { inputs, input_dim, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match &self.targets {
            Targets::Values { data, dim } => Target::Values(&data[i * dim..(i + 1) * dim]),
            Targets::Sm3(c) => Target::Sm3(&c[i]),
        }
    }

    pub fn all_targets(&self) -> Vec<Target<'_>> {
        (0..self.len()).map(|i| self.target(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `E_tot`.
    pub max_epochs: usize,
    /// `ϖ`: validation-loss change regarded as no change.
    pub min_delta: f64,
    /// `Ê`: epochs of no change before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, max_epochs: 100, min_delta: 1e-6, patience: 50, adam: AdamConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(self.max_epochs >= 1, Config, "max_epochs must be >= 1");
        ensure!(self.min_delta > 0.0, Config, "min_delta must be positive");
        ensure!(self.patience <= self.max_epochs, Config, "patience cannot exceed max_epochs");
        ensure!(self.adam.lr > 0.0, Config, "learning rate must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    /// Epoch of the returned weights; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    /// Training plus validation wall time.
    pub seconds: f64,
}

/// Mini-batch Adam training with validation snapshotting and early stopping.
///
/// On return `net` holds the weights with the lowest validation loss seen.
pub fn fit(net: &mut Network, train: &TrainSet, val: &TrainSet, loss: &LossSpec, cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    loss.validate()?;
    ensure!(!train.is_empty() && !val.is_empty(), Param, "training and validation sets must be nonempty");
    ensure!(
        train.input_dim == net.input_dim() && val.input_dim == net.input_dim(),
        Shape,
        "data width does not match the model input {}",
        net.input_dim()
    );
    let start = Instant::now();
    let val_targets = val.all_targets();
    let train_targets = train.all_targets();
    let initial_train_loss = net.mean_loss(&train.inputs, &train_targets, loss)?;
    let initial_val_loss = net.mean_loss(&val.inputs, &val_targets, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, net.params.len());
    let mut grad = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (initial_val_loss, 0, net.params.clone());
    let mut previous = initial_val_loss;
    let mut flat_epochs = 0;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size * train.input_dim);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch_inputs.clear();
            for &i in chunk {
                batch_inputs.extend_from_slice(train.input(i));
            }
            let targets: Vec<Target<'_>> = chunk.iter().map(|&i| train.target(i)).collect();
            let value = net.loss_and_grad(&batch_inputs, &targets, loss, &mut grad)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, msg: format!("batch loss {value}") });
            }
            running += value * chunk.len() as f64;
            adam.step(&mut net.params, &grad);
        }
        let train_loss = running / train.len() as f64;
        let val_loss = net.mean_loss(&val.inputs, &val_targets, loss)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, msg: format!("validation loss {val_loss}") });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, wall_time: start.elapsed().as_secs_f64() });
        if val_loss < best.0 {
            best = (val_loss, epoch, net.params.clone());
        }
        flat_epochs = if (val_loss - previous).abs() <= cfg.min_delta { flat_epochs + 1 } else { 0 };
        previous = val_loss;
        if flat_epochs >= cfg.patience && cfg.patience > 0 {
            stop = StopReason::Plateau;
            break;
        }
    }
    let (best_val_loss, best_epoch, params) = best;
    net.params = params;
    Ok(FitReport {
        history,
        initial_train_loss,
        initial_val_loss,
        best_epoch,
        best_val_loss,
        stop,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Outputs with the mean per-sample prediction latency `t3'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub outputs: Vec<f64>,
    pub seconds: f64,
    pub per_sample: Option<f64>,
}

/// Forward pass over every row, one sample at a time, as a deployed predictor would run.
pub fn predict_batch(net: &Network, inputs: &[f64]) -> Result<Prediction> {
    let dim = net.input_dim();
    ensure!(inputs.len() % dim == 0, Shape, "inputs do not form rows of width {dim}");
    let rows = inputs.len() / dim;
    let start = Instant::now();
    let mut outputs = Vec::with_capacity(rows * net.output_dim());
    for row in inputs.chunks(dim) {
        outputs.extend(net.forward(row)?);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Prediction { outputs, seconds, per_sample: (rows > 0).then(|| seconds / rows as f64) })
}

/// Serialized model with its input normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub network: Network,
    #[serde(default)]
    pub normalizer: Option<Standardizer>,
    /// Free-form provenance (preset name, dataset hash, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(network: Network, normalizer: Option<Standardizer>) -> Self {
        Self { version: CHECKPOINT_VERSION, network, normalizer, meta: serde_json::Value::Null }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        ensure!(ck.version == CHECKPOINT_VERSION, Config, "unsupported checkpoint version {}", ck.version);
        Network::from_params(ck.network.spec.clone(), ck.network.params.clone())?;
        Ok(ck)
    }
}

/// Writes `epoch,train_loss,val_loss,wall_time`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,wall_time\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.wall_time));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dense(n: usize) -> Network {
        let mut params = vec![0.0; n * n + n];
        for i in 0..n {
            params[i * n + i] = 1.0;
        }
        Network::from_params(ModelSpec::new(n, vec![Layer::dense(n, n)]).unwrap(), params).unwrap()
    }

    #[test]
    fn identity_layer_and_activations() {
        let net = identity_dense(3);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let relu = Network::from_params(ModelSpec::new(2, vec![Layer::act(Activation::Relu)]).unwrap(), vec![]).unwrap();
        assert_eq!(relu.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        let leaky = Network::from_params(ModelSpec::new(2, vec![Layer::act(Activation::LeakyRelu)]).unwrap(), vec![]).unwrap();
        assert_eq!(leaky.forward(&[-1.0, 2.0]).unwrap(), vec![-0.01, 2.0]);
    }

    #[test]
    fn shape_errors() {
        assert!(ModelSpec::new(3, vec![Layer::dense(4, 2)]).is_err());
        let net = identity_dense(2);
        assert!(net.forward(&[1.0]).is_err());
        // Valid 2x3 conv cannot shrink a 1x2 image.
        assert!(ModelSpec::new(2, vec![Layer::conv(1, 1, 2, 1, Padding::Valid)]).is_err());
        assert!(ModelSpec::new(2, vec![Layer::conv(1, 1, 2, 1, Padding::Same)]).is_ok());
    }

    #[test]
    fn presets_compose() {
        for spec in [
            presets::sm1(16),
            presets::model_a(4, 32),
            presets::model_b(32),
            presets::sm2b(3),
            presets::dqn(9, 10),
            presets::sm3_conv(2, 4, 8),
            presets::sm3_conv(2, 4, 16),
        ] {
            spec.validate().unwrap();
        }
        assert_eq!(presets::sm3_conv(2, 4, 8).output_dim(), 64);
        assert!(presets::by_name("lstm", 1, 1, 1).is_err());
    }

    #[test]
    fn valid_conv_matches_hand_computation() {
        // 1 channel, 2x3 input, one 2x3 filter: a single dot product.
        let spec = ModelSpec::new(6, vec![Layer::conv(1, 2, 3, 1, Padding::Valid)]).unwrap();
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5];
        let net = Network::from_params(spec, params).unwrap();
        let out = net.forward(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0 - 3.0 + 8.0 + 5.0 + 0.5]);
    }

    #[test]
    fn loss_values() {
        let p = [0.3, 0.7];
        let spec = LossSpec::PowerViolation { beta: 2.0, p_max: 1.0, groups: 1 };
        assert_eq!(spec.eval(&p, &Target::Values(&p), None).unwrap(), 0.0);
        let beta0 = LossSpec::PowerViolation { beta: 0.0, p_max: 1.0, groups: 1 };
        let y = [0.1, 0.2];
        let mse = LossSpec::Mse.eval(&p, &Target::Values(&y), None).unwrap();
        assert_eq!(beta0.eval(&p, &Target::Values(&y), None).unwrap(), mse);
        let over = [1.2, 0.8];
        let v = spec.eval(&over, &Target::Values(&over), None).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(LossSpec::Mse.eval(&[f64::NAN], &Target::Values(&[0.0]), None).is_err());
        let b = LossSpec::Bce.eval(&[0.5], &Target::Values(&[1.0]), None).unwrap();
        assert!((b - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_output_gives_zero_gradient() {
        let spec = ModelSpec::mlp(3, &[4], 2, Activation::Relu, Activation::Linear);
        let mut net = Network::new(spec, Init::Glorot, 1).unwrap();
        let n = net.params.len();
        // Zero the output layer (last 4*2 + 2 parameters).
        net.params[n - 10..].iter_mut().for_each(|p| *p = 0.0);
        let mut grad = vec![1.0; n];
        let zeros = [0.0, 0.0];
        net.loss_and_grad(&[0.1, -0.3, 0.7], &[Target::Values(&zeros)], &LossSpec::Mse, &mut grad).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_least_squares_gradient() {
        let spec = ModelSpec::new(2, vec![Layer::dense(2, 1)]).unwrap();
        let net = Network::from_params(spec, vec![0.5, -1.0, 0.25]).unwrap();
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, 1.0];
        let y = [[1.0], [0.0], [2.0]];
        let targets: Vec<Target<'_>> = y.iter().map(|v| Target::Values(v)).collect();
        let mut grad = vec![0.0; 3];
        net.loss_and_grad(&x, &targets, &LossSpec::Mse, &mut grad).unwrap();
        let mut expect = [0.0; 3];
        for s in 0..3 {
            let r = 0.5 * x[2 * s] - x[2 * s + 1] + 0.25 - y[s][0];
            expect[0] += 2.0 * r * x[2 * s] / 3.0;
            expect[1] += 2.0 * r * x[2 * s + 1] / 3.0;
            expect[2] += 2.0 * r / 3.0;
        }
        for i in 0..3 {
            assert!((grad[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_behaviour() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut w = vec![1.0, -2.0];
        adam.step(&mut w, &[0.0, 0.0]);
        assert_eq!(w, vec![1.0, -2.0]);
        // First step moves every coordinate by lr in the direction of -sign(g).
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut w = vec![0.0, 0.0];
        adam.step(&mut w, &[3.0, -0.01]);
        assert!((w[0] + 1e-3).abs() < 1e-8 && (w[1] - 1e-3).abs() < 1e-6);
        // 1-D quadratic (w - 2)².
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, 1);
        let mut w = vec![-1.0];
        for _ in 0..1000 {
            let g = [2.0 * (w[0] - 2.0)];
            adam.step(&mut w, &g);
        }
        assert!((w[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn projection_of_groups() {
        let mut a = vec![0.2, 0.3];
        project_groups(&mut a, 1, 1.0);
        assert_eq!(a, vec![0.2, 0.3]);
        let mut b = vec![1.0, 1.0, 0.5, 0.5];
        project_groups(&mut b, 2, 1.0);
        assert_eq!(b, vec![0.5, 0.5, 0.5, 0.5]);
    }

    fn toy(n: usize, seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            x.extend([a, b]);
            y.push(0.7 * a - 0.4 * b + 0.1);
        }
        TrainSet::new(x, 2, Targets::Values { data: y, dim: 1 }).unwrap()
    }

    #[test]
    fn fit_stopping_rules() {
        let spec = ModelSpec::mlp(2, &[8], 1, Activation::Relu, Activation::Linear);
        let (train, val) = (toy(64, 1), toy(32, 2));
        let mut net = Network::new(spec.clone(), Init::Glorot, 3).unwrap();
        let one = TrainConfig { max_epochs: 1, patience: 1, ..TrainConfig::default() };
        assert_eq!(fit(&mut net, &train, &val, &LossSpec::Mse, &one).unwrap().history.len(), 1);
        let mut net = Network::new(spec.clone(), Init::Glorot, 3).unwrap();
        let flat = TrainConfig { max_epochs: 40, patience: 7, min_delta: f64::INFINITY, ..TrainConfig::default() };
        let r = fit(&mut net, &train, &val, &LossSpec::Mse, &flat).unwrap();
        assert_eq!((r.history.len(), r.stop), (7, StopReason::Plateau));
        assert!(r.history.iter().all(|h| r.best_val_loss <= h.val_loss));
    }

    #[test]
    fn fit_is_deterministic_and_learns() {
        let spec = ModelSpec::mlp(2, &[16], 1, Activation::Relu, Activation::Linear);
        let (train, val) = (toy(256, 4), toy(64, 5));
        let cfg = TrainConfig { max_epochs: 5, patience: 5, adam: AdamConfig { lr: 0.01, ..AdamConfig::default() }, ..TrainConfig::default() };
        let mut a = Network::new(spec.clone(), Init::Glorot, 9).unwrap();
        let mut b = Network::new(spec, Init::Glorot, 9).unwrap();
        let ra = fit(&mut a, &train, &val, &LossSpec::Mse, &cfg).unwrap();
        fit(&mut b, &train, &val, &LossSpec::Mse, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let losses: Vec<f64> = ra.history.iter().map(|h| h.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::new(presets::model_b(4), Init::Glorot, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("rrm-ck-{}", std::process::id()));
        let path = dir.join("model.json");
        let ck = Checkpoint::new(net, Some(Standardizer { mean: vec![0.1; 4], std: vec![1.0 / 3.0; 4] }));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn predictions_report_latency() {
        let net = identity_dense(2);
        let p = predict_batch(&net, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.outputs, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(p.per_sample.unwrap() >= 0.0 && p.per_sample.unwrap().is_finite());
        assert!(predict_batch(&net, &[]).unwrap().per_sample.is_none());
    }
}
