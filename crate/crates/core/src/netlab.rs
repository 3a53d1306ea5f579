//! A small dense feed-forward network: forward inference, cross-entropy
//! training and exact backpropagation of the KL divergence between the
//! uniform distribution and the softmax output to any tapped layer.
//!
//! Parameters and exported activations are `f32`; every reduction
//! (matrix-vector products, softmax, KL) accumulates in `f64`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Decoder, Encoder};
use crate::coverage::{CoverageModel, StateSource};
use crate::data::LabeledSet;
use crate::error::{NacError, Result};
use crate::state::{layer_id_for_tap, sigmoid_state, tap_for_layer_id};

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"NACW";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_at_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One fully connected layer. `weights` is row-major `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f32>,
        biases: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(NacError::Dimension("layer widths must be positive".into()));
        }
        if weights.len() != inputs * outputs || biases.len() != outputs {
            return Err(NacError::Dimension(format!(
                "layer {inputs}->{outputs} needs {} weights and {outputs} biases, got {} and {}",
                inputs * outputs,
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            biases,
            activation,
        })
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.outputs);
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.biases[o] as f64;
            for (w, v) in row.iter().zip(input) {
                acc += *w as f64 * v;
            }
            out.push(self.activation.apply(acc));
        }
        out
    }

    /// `Wᵀ · delta`
    fn backward_input(&self, delta: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.inputs];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (g, w) in grad.iter_mut().zip(row) {
                *g += *w as f64 * d;
            }
        }
        grad
    }
}

/// Softmax output of a logit vector together with the uniform reference.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBundle {
    logits: Vec<f64>,
    probs: Vec<f64>,
    uniform: Vec<f64>,
}

impl LogitBundle {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(NacError::InvalidArgument("empty logit vector".into()));
        }
        if let Some(col) = logits.iter().position(|v| !v.is_finite()) {
            return Err(NacError::NonFinite { row: 0, col });
        }
        let probs = softmax(&logits);
        let c = logits.len();
        Ok(Self {
            logits,
            probs,
            uniform: vec![1.0 / c as f64; c],
        })
    }

    pub fn from_logits_f32(logits: &[f32]) -> Result<Self> {
        Self::from_logits(logits.iter().map(|&v| v as f64).collect())
    }

    pub fn class_count(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn uniform(&self) -> &[f64] {
        &self.uniform
    }

    /// `p − u`, the gradient of the KL-to-uniform divergence w.r.t. the logits.
    pub fn kl_logit_gradient(&self) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.uniform)
            .map(|(p, u)| p - u)
            .collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `D_KL(u ‖ p) = Σ u_i ln(u_i / p_i)`.
///
/// Probabilities are floored at [`PROB_FLOOR`]; a precision warning is
/// logged (once per process, then at debug level) when the floor is hit
/// since the value is then a lower bound.
pub fn kl_uniform(bundle: &LogitBundle) -> f64 {
    static WARNED: AtomicBool = AtomicBool::new(false);
    let (kl, clamped) = kl_uniform_flagged(bundle);
    if clamped {
        if WARNED.swap(true, Ordering::Relaxed) {
            log::debug!("kl_uniform: probability underflow clamped to {PROB_FLOOR:e}");
        } else {
            log::warn!(
                "kl_uniform: probability underflow clamped to {PROB_FLOOR:e}; value is imprecise (further occurrences logged at debug level)"
            );
        }
    }
    kl
}

/// [`kl_uniform`] without logging; the flag reports whether any
/// probability was floored.
pub fn kl_uniform_flagged(bundle: &LogitBundle) -> (f64, bool) {
    let mut clamped = false;
    let kl: f64 = bundle
        .probs
        .iter()
        .zip(&bundle.uniform)
        .map(|(&p, &u)| {
            let p = if p < PROB_FLOOR {
                clamped = true;
                PROB_FLOOR
            } else {
                p
            };
            u * (u / p).ln()
        })
        .sum();
    (kl.max(0.0), clamped)
}

/// Activations kept by a forward pass, in `f64`.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    input: Vec<f64>,
    /// Post-nonlinearity output of every layer; the last entry is the logits.
    outputs: Vec<Vec<f64>>,
}

impl Trace {
    fn layer_input(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }

    fn logits(&self) -> &[f64] {
        self.outputs.last().expect("network has at least one layer")
    }
}

/// Result of [`DenseNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Post-nonlinearity output `z` at every tap point.
    pub activations: BTreeMap<usize, Vec<f32>>,
    pub bundle: LogitBundle,
}

/// Result of [`DenseNet::backward_kl`].
#[derive(Clone, Debug)]
pub struct KlBackward {
    pub activations: BTreeMap<usize, Vec<f32>>,
    /// `∂D_KL/∂z` at every tap point.
    pub gradients: BTreeMap<usize, Vec<f32>>,
    pub bundle: LogitBundle,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    taps: Vec<usize>,
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>, mut taps: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NacError::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(NacError::Dimension(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        let last = layers.last().unwrap();
        if last.activation != Activation::Identity {
            return Err(NacError::InvalidArgument(
                "final (logit) layer must use the identity nonlinearity".into(),
            ));
        }
        taps.sort_unstable();
        taps.dedup();
        if let Some(&bad) = taps.iter().find(|&&t| t + 1 >= layers.len()) {
            return Err(NacError::InvalidArgument(format!(
                "tap {bad} must refer to a hidden layer (network has {} layers)",
                layers.len()
            )));
        }
        Ok(Self { layers, taps })
    }

    /// He-initialised ReLU network over `widths` (input width first, class
    /// count last) with the logit layer left linear.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], taps: Vec<usize>, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NacError::InvalidArgument(
                "need at least input and output widths".into(),
            ));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(NacError::Dimension("layer widths must be positive".into()));
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..fan_in * fan_out)
                .map(|_| normal.sample(rng) as f32)
                .collect();
            let activation = if i + 2 == widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Dense::new(
                fan_in,
                fan_out,
                weights,
                vec![0.0; fan_out],
                activation,
            )?);
        }
        Self::new(layers, taps)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Width of the network input.
    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Number of neurons emitted by layer `layer`.
    pub fn layer_width(&self, layer: usize) -> Option<usize> {
        self.layers.get(layer).map(|l| l.outputs)
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap + 1 >= self.layers.len() {
            return Err(NacError::InvalidArgument(format!(
                "layer {tap} is not a hidden layer"
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f32]) -> Result<Trace> {
        if x.len() != self.input_width() {
            return Err(NacError::Dimension(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        let input: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(if i == 0 { &input } else { &outputs[i - 1] });
            outputs.push(out);
        }
        Ok(Trace { input, outputs })
    }

    fn tap_outputs(&self, trace: &Trace) -> BTreeMap<usize, Vec<f32>> {
        self.taps
            .iter()
            .map(|&t| (t, trace.outputs[t].iter().map(|&v| v as f32).collect()))
            .collect()
    }

    pub fn forward(&self, x: &[f32]) -> Result<ForwardPass> {
        let trace = self.trace(x)?;
        Ok(ForwardPass {
            activations: self.tap_outputs(&trace),
            bundle: LogitBundle::from_logits(trace.logits().to_vec())?,
        })
    }

    /// Output of hidden layer `layer` (in `f64`) and the logit bundle.
    pub fn forward_layer(&self, x: &[f32], layer: usize) -> Result<(Vec<f64>, LogitBundle)> {
        self.check_tap(layer)?;
        let trace = self.trace(x)?;
        let bundle = LogitBundle::from_logits(trace.logits().to_vec())?;
        Ok((trace.outputs[layer].clone(), bundle))
    }

    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(self.trace(x)?.logits()))
    }

    /// Propagates `top` (a gradient w.r.t. the logits) down to layer
    /// `stop_at`. `on_output(l, g)` sees (and may modify) the gradient
    /// w.r.t. the post-nonlinearity output of layer `l`; `on_delta(l, d,
    /// input)` sees the gradient w.r.t. its pre-activation.
    fn backprop(
        &self,
        trace: &Trace,
        top: Vec<f64>,
        stop_at: usize,
        mut on_output: impl FnMut(usize, &mut Vec<f64>),
        mut on_delta: impl FnMut(usize, &[f64], &[f64]),
    ) {
        let mut grad = top;
        for l in (stop_at..self.layers.len()).rev() {
            on_output(l, &mut grad);
            let layer = &self.layers[l];
            let delta: Vec<f64> = grad
                .iter()
                .zip(&trace.outputs[l])
                .map(|(g, &o)| g * layer.activation.derivative_at_output(o))
                .collect();
            on_delta(l, &delta, trace.layer_input(l));
            if l > stop_at {
                grad = layer.backward_input(&delta);
            }
        }
    }

    /// One forward and one backward pass returning `∂D_KL(u‖p)/∂z` at every
    /// tap point. The logit-level gradient is the analytic `p − u`.
    pub fn backward_kl(&self, x: &[f32]) -> Result<KlBackward> {
        let trace = self.trace(x)?;
        let bundle = LogitBundle::from_logits(trace.logits().to_vec())?;
        let kl = kl_uniform(&bundle);
        let mut gradients = BTreeMap::new();
        if let Some(&lowest) = self.taps.first() {
            self.backprop(
                &trace,
                bundle.kl_logit_gradient(),
                lowest,
                |l, g| {
                    if self.taps.contains(&l) {
                        gradients.insert(l, g.iter().map(|&v| v as f32).collect());
                    }
                },
                |_, _, _| {},
            );
        }
        Ok(KlBackward {
            activations: self.tap_outputs(&trace),
            gradients,
            bundle,
            kl,
        })
    }

    /// Same as [`backward_kl`](Self::backward_kl) but in full `f64`, for a
    /// single hidden layer.
    pub fn kl_gradient_f64(&self, x: &[f32], layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tap(layer)?;
        let trace = self.trace(x)?;
        let bundle = LogitBundle::from_logits(trace.logits().to_vec())?;
        let mut out = Vec::new();
        self.backprop(
            &trace,
            bundle.kl_logit_gradient(),
            layer,
            |l, g| {
                if l == layer {
                    out = g.clone();
                }
            },
            |_, _, _| {},
        );
        Ok((trace.outputs[layer].clone(), out))
    }

    /// Jacobian of the logits w.r.t. the output of hidden layer `layer`:
    /// row `c` holds `∂g(z)_c/∂z`.
    pub fn logit_jacobian(&self, x: &[f32], layer: usize) -> Result<Vec<Vec<f64>>> {
        self.check_tap(layer)?;
        let trace = self.trace(x)?;
        let c = self.class_count();
        let mut rows = Vec::with_capacity(c);
        for class in 0..c {
            let mut top = vec![0.0; c];
            top[class] = 1.0;
            let mut row = Vec::new();
            self.backprop(
                &trace,
                top,
                layer,
                |l, g| {
                    if l == layer {
                        row = g.clone();
                    }
                },
                |_, _, _| {},
            );
            rows.push(row);
        }
        Ok(rows)
    }

    /// Logits obtained by feeding `z` as the output of hidden layer `layer`.
    pub fn logits_from_layer(&self, layer: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_tap(layer)?;
        if z.len() != self.layers[layer].outputs {
            return Err(NacError::Dimension(format!(
                "layer {layer} has {} neurons, got {}",
                self.layers[layer].outputs,
                z.len()
            )));
        }
        let mut cur = z.to_vec();
        for l in &self.layers[layer + 1..] {
            cur = l.forward(&cur);
        }
        Ok(cur)
    }

    /// KL-to-uniform as a function of a hidden layer's output.
    pub fn kl_from_layer(&self, layer: usize, z: &[f64]) -> Result<f64> {
        let logits = self.logits_from_layer(layer, z)?;
        Ok(kl_uniform(&LogitBundle::from_logits(logits)?))
    }

    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (x, y) in data.iter() {
            if self.predict(x)? == y as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(CHECKPOINT_MAGIC);
        enc.u32(CHECKPOINT_VERSION);
        enc.u32(self.layers.len() as u32);
        for l in &self.layers {
            enc.u32(l.inputs as u32);
            enc.u32(l.outputs as u32);
        }
        for l in &self.layers {
            enc.f32s(&l.weights);
            enc.f32s(&l.biases);
            enc.u8(l.activation.tag());
        }
        enc.u32(self.taps.len() as u32);
        for &t in &self.taps {
            enc.u32(t as u32);
        }
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.magic(CHECKPOINT_MAGIC)?;
        let at = dec.offset();
        let version = dec.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NacError::Format {
                offset: at,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = dec.u32()? as usize;
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            dims.push((dec.u32()? as usize, dec.u32()? as usize));
        }
        let mut layers = Vec::with_capacity(count);
        for (inputs, outputs) in dims {
            let weights = dec.f32s(inputs * outputs)?;
            let biases = dec.f32s(outputs)?;
            let at = dec.offset();
            let tag = dec.u8()?;
            let activation = Activation::from_tag(tag).ok_or(NacError::Format {
                offset: at,
                message: format!("unknown nonlinearity tag {tag}"),
            })?;
            layers.push(Dense::new(inputs, outputs, weights, biases, activation)?);
        }
        let tap_count = dec.u32()? as usize;
        let taps = dec
            .u32s(tap_count)?
            .into_iter()
            .map(|t| t as usize)
            .collect();
        dec.finish()?;
        Self::new(layers, taps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    #[default]
    None,
    Maximize,
    Minimize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReg {
    pub mode: EntropyMode,
    pub coefficient: f64,
    /// Steps between histogram refreshes.
    pub refresh_every: usize,
}

impl Default for EntropyReg {
    fn default() -> Self {
        Self {
            mode: EntropyMode::None,
            coefficient: 0.0,
            refresh_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub entropy: EntropyReg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            entropy: EntropyReg::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NacError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NacError::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.entropy.coefficient.is_nan() || self.entropy.coefficient < 0.0 {
            return Err(NacError::InvalidArgument(
                "entropy coefficient must be non-negative".into(),
            ));
        }
        if self.entropy.refresh_every == 0 {
            return Err(NacError::InvalidArgument(
                "refresh interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch objective per step.
    pub loss_trace: Vec<f64>,
    /// Mean NAC entropy per step (empty without regularisation).
    pub entropy_trace: Vec<f64>,
}

/// Minibatch SGD on cross-entropy; see [`train_with`].
pub fn train(
    net: &mut DenseNet,
    data: &LabeledSet,
    cfg: &TrainConfig,
    coverage: Option<&CoverageModel>,
) -> Result<TrainReport> {
    train_with(net, data, cfg, coverage, |_, _| {})
}

struct EntropyTerm {
    layer: usize,
    model: CoverageModel,
    sign: f64,
    coefficient: f64,
    alpha: f64,
}

impl EntropyTerm {
    fn refresh(&mut self, net: &DenseNet, data: &LabeledSet) -> Result<()> {
        let mut fresh = self.model.empty_like();
        let n = net.layers[self.layer].outputs;
        let mut row = Vec::with_capacity(n);
        for (x, _) in data.iter() {
            let trace = net.trace(x)?;
            row.clear();
            row.extend(
                trace.outputs[self.layer]
                    .iter()
                    .map(|&z| sigmoid_state(self.alpha, z)),
            );
            fresh.observe_row(&row)?;
        }
        fresh.freeze();
        self.model = fresh;
        Ok(())
    }

    /// Adds `±λ ∂H/∂z / batch` to `grad` and returns `H(z)` for the sample.
    fn apply(&self, z: &[f64], grad: &mut [f64], batch: f64) -> f64 {
        let mut h = 0.0;
        for (i, (&zi, g)) in z.iter().zip(grad.iter_mut()).enumerate() {
            let s = sigmoid_state(self.alpha, zi);
            let (p, dp_ds) = self.model.interpolated_mass(i, s);
            let lp = p.ln();
            h -= p * lp;
            let dh_dz = -(lp + 1.0) * dp_ds * self.alpha * s * (1.0 - s);
            *g += self.sign * self.coefficient * dh_dz / batch;
        }
        h
    }
}

/// Minibatch SGD on cross-entropy with an optional NAC-entropy term
/// `∓λ·H(z)` on the layer that `coverage` was fitted for.
///
/// `observer(step, net)` is invoked after every completed step (and once
/// with `step = 0` before training starts). Training is deterministic for a
/// given seed.
pub fn train_with(
    net: &mut DenseNet,
    data: &LabeledSet,
    cfg: &TrainConfig,
    coverage: Option<&CoverageModel>,
    mut observer: impl FnMut(usize, &DenseNet),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.dims() != net.input_width() {
        return Err(NacError::Dimension(format!(
            "data has {} features, network expects {}",
            data.dims(),
            net.input_width()
        )));
    }
    let classes = net.class_count();
    if let Some(bad) = data.labels().iter().find(|&&y| y as usize >= classes) {
        return Err(NacError::InvalidArgument(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let mut entropy = match cfg.entropy.mode {
        EntropyMode::None => None,
        mode => {
            let model = coverage.ok_or_else(|| {
                NacError::InvalidArgument("entropy regularisation requires a coverage model".into())
            })?;
            let alpha = match model.source() {
                StateSource::RawSquashed { alpha } => alpha,
                StateSource::ActivationState { .. } => {
                    return Err(NacError::InvalidArgument(
                        "entropy regularisation needs a coverage model fitted over raw outputs"
                            .into(),
                    ))
                }
            };
            let layer = tap_for_layer_id(model.layer_id()).ok_or_else(|| {
                NacError::InvalidArgument(format!(
                    "cannot map layer id {:?} to a network layer",
                    model.layer_id()
                ))
            })?;
            net.check_tap(layer)?;
            if model.neurons() != net.layers[layer].outputs {
                return Err(NacError::Dimension(format!(
                    "coverage model has {} neurons, layer {} has {}",
                    model.neurons(),
                    layer_id_for_tap(layer),
                    net.layers[layer].outputs
                )));
            }
            Some(EntropyTerm {
                layer,
                model: model.clone(),
                sign: if mode == EntropyMode::Maximize {
                    -1.0
                } else {
                    1.0
                },
                coefficient: cfg.entropy.coefficient,
                alpha,
            })
        }
    };

    let mut report = TrainReport::default();
    observer(0, net);
    if cfg.steps == 0 || data.is_empty() {
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.batch_size.min(data.len());

    let mut w_grads: Vec<Vec<f64>> = net
        .layers
        .iter()
        .map(|l| vec![0.0; l.weights.len()])
        .collect();
    let mut b_grads: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.outputs]).collect();

    for step in 0..cfg.steps {
        if let Some(term) = entropy.as_mut() {
            if step % cfg.entropy.refresh_every == 0 {
                term.refresh(net, data)?;
            }
        }
        w_grads.iter_mut().for_each(|g| g.fill(0.0));
        b_grads.iter_mut().for_each(|g| g.fill(0.0));
        let mut loss = 0.0;
        let mut h_sum = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let (x, y) = data.get(idx);
            let trace = net.trace(x)?;
            let logits = trace.logits();
            let probs = softmax(logits);
            loss += log_sum_exp(logits) - logits[y as usize];
            let mut top = probs;
            top[y as usize] -= 1.0;
            top.iter_mut().for_each(|g| *g /= batch as f64);
            let layers = &net.layers;
            let ent = entropy.as_ref();
            let mut h_sample = 0.0;
            net.backprop(
                &trace,
                top,
                0,
                |l, g| {
                    if let Some(term) = ent {
                        if term.layer == l {
                            h_sample = term.apply(&trace.outputs[l], g, batch as f64);
                        }
                    }
                },
                |l, delta, input| {
                    let inputs = layers[l].inputs;
                    let wg = &mut w_grads[l];
                    for (o, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        b_grads[l][o] += d;
                        let row = &mut wg[o * inputs..(o + 1) * inputs];
                        for (w, v) in row.iter_mut().zip(input) {
                            *w += d * v;
                        }
                    }
                },
            );
            h_sum += h_sample;
        }
        let mut objective = loss / batch as f64;
        if let Some(term) = entropy.as_ref() {
            let h = h_sum / batch as f64;
            objective += term.sign * term.coefficient * h;
            report.entropy_trace.push(h);
        }
        if !objective.is_finite() {
            return Err(NacError::NonFiniteLoss {
                step,
                loss: objective,
            });
        }
        report.loss_trace.push(objective);
        let lr = cfg.learning_rate;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&w_grads[l]) {
                *w = (*w as f64 - lr * g) as f32;
            }
            for (b, g) in layer.biases.iter_mut().zip(&b_grads[l]) {
                *b = (*b as f64 - lr * g) as f32;
            }
        }
        observer(step + 1, net);
    }
    Ok(report)
}
