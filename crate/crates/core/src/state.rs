//! Neuron activation states: `σ_α(z ⊙ ∂D_KL/∂z)` per sample and neuron.

use crate::error::{NacError, Result};
use crate::netlab::DenseNet;

/// Sigmoid arguments are clamped to this magnitude before `exp`.
pub const EXPONENT_CLAMP: f64 = 500.0;

/// Canonical identifier for hidden layer `tap` of a [`DenseNet`].
pub fn layer_id_for_tap(tap: usize) -> String {
    format!("layer{tap}")
}

pub fn tap_for_layer_id(id: &str) -> Option<usize> {
    id.strip_prefix("layer")?.parse().ok()
}

/// `1 / (1 + exp(−α·x))`, kept strictly inside `(0, 1)`.
#[inline]
pub fn sigmoid_state(alpha: f64, x: f64) -> f64 {
    let e = (alpha * x).clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
    let s = 1.0 / (1.0 + (-e).exp());
    if s >= 1.0 {
        1.0f64.next_down()
    } else if s <= 0.0 {
        0.0f64.next_up()
    } else {
        s
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(NacError::InvalidArgument(format!(
            "sigmoid steepness must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

/// Raw outputs `z` of one layer over a batch and the KL gradient w.r.t. them.
/// Both matrices are row-major `rows × neurons`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLayerBatch {
    layer_id: String,
    rows: usize,
    neurons: usize,
    z: Vec<f32>,
    grad: Vec<f32>,
}

impl RawLayerBatch {
    pub fn new(
        layer_id: impl Into<String>,
        rows: usize,
        neurons: usize,
        z: Vec<f32>,
        grad: Vec<f32>,
    ) -> Result<Self> {
        if neurons == 0 {
            return Err(NacError::Dimension(
                "layer must have at least one neuron".into(),
            ));
        }
        if z.len() != rows * neurons || grad.len() != rows * neurons {
            return Err(NacError::Dimension(format!(
                "expected {rows}×{neurons} activations and gradients, got {} and {}",
                z.len(),
                grad.len()
            )));
        }
        for m in [&z, &grad] {
            if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                return Err(NacError::NonFinite {
                    row: i / neurons,
                    col: i % neurons,
                });
            }
        }
        Ok(Self {
            layer_id: layer_id.into(),
            rows,
            neurons,
            z,
            grad,
        })
    }

    /// Runs `backward_kl` on every input and collects layer `layer`.
    pub fn from_net<'a>(
        net: &DenseNet,
        inputs: impl IntoIterator<Item = &'a [f32]>,
        layer: usize,
    ) -> Result<Self> {
        let neurons = net
            .layer_width(layer)
            .filter(|_| layer + 1 < net.layers().len())
            .ok_or_else(|| NacError::InvalidArgument(format!("layer {layer} is not hidden")))?;
        let mut z = Vec::new();
        let mut grad = Vec::new();
        let mut rows = 0;
        for x in inputs {
            let (zs, gs) = net.kl_gradient_f64(x, layer)?;
            z.extend(zs.iter().map(|&v| v as f32));
            grad.extend(gs.iter().map(|&v| v as f32));
            rows += 1;
        }
        Self::new(layer_id_for_tap(layer), rows, neurons, z, grad)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn z(&self) -> &[f32] {
        &self.z
    }

    pub fn grad(&self) -> &[f32] {
        &self.grad
    }

    pub fn z_row(&self, row: usize) -> &[f32] {
        &self.z[row * self.neurons..(row + 1) * self.neurons]
    }

    pub fn grad_row(&self, row: usize) -> &[f32] {
        &self.grad[row * self.neurons..(row + 1) * self.neurons]
    }

    /// Batch restricted to `rows` (in the given order).
    pub fn select(&self, rows: &[usize]) -> Self {
        let n = self.neurons;
        let mut z = Vec::with_capacity(rows.len() * n);
        let mut grad = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            z.extend_from_slice(self.z_row(r));
            grad.extend_from_slice(self.grad_row(r));
        }
        Self {
            layer_id: self.layer_id.clone(),
            rows: rows.len(),
            neurons: n,
            z,
            grad,
        }
    }
}

/// Row-major `rows × neurons` matrix of states in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronStateMatrix {
    layer_id: String,
    rows: usize,
    neurons: usize,
    values: Vec<f64>,
    alpha: f64,
}

impl NeuronStateMatrix {
    pub fn new(
        layer_id: impl Into<String>,
        rows: usize,
        neurons: usize,
        values: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if neurons == 0 {
            return Err(NacError::Dimension(
                "layer must have at least one neuron".into(),
            ));
        }
        if values.len() != rows * neurons {
            return Err(NacError::Dimension(format!(
                "expected {} states, got {}",
                rows * neurons,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(NacError::InvalidArgument(format!(
                "state {} at row {}, column {} is outside (0, 1)",
                values[i],
                i / neurons,
                i % neurons
            )));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            rows,
            neurons,
            values,
            alpha,
        })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.neurons..(row + 1) * self.neurons]
    }

    pub fn get(&self, row: usize, neuron: usize) -> f64 {
        self.values[row * self.neurons + neuron]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.neurons)
    }
}

/// `ẑ = σ_α(z ⊙ ∂D_KL/∂z)` for every entry of `batch`.
pub fn neuron_states(batch: &RawLayerBatch, alpha: f64) -> Result<NeuronStateMatrix> {
    check_alpha(alpha)?;
    let values = batch
        .z
        .iter()
        .zip(&batch.grad)
        .map(|(&z, &g)| sigmoid_state(alpha, z as f64 * g as f64))
        .collect();
    NeuronStateMatrix::new(
        batch.layer_id.clone(),
        batch.rows,
        batch.neurons,
        values,
        alpha,
    )
}

/// Sigmoid-squashed raw outputs `σ_α(z)`, used when coverage is modelled
/// over raw activations instead of activation states.
pub fn squashed_outputs(batch: &RawLayerBatch, alpha: f64) -> Result<NeuronStateMatrix> {
    check_alpha(alpha)?;
    let values = batch
        .z
        .iter()
        .map(|&z| sigmoid_state(alpha, z as f64))
        .collect();
    NeuronStateMatrix::new(
        batch.layer_id.clone(),
        batch.rows,
        batch.neurons,
        values,
        alpha,
    )
}

/// Inputs to the class-wise decomposition of the activation state:
/// per-sample outputs, logit Jacobians and predicted probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub layer_id: String,
    pub rows: usize,
    pub neurons: usize,
    pub classes: usize,
    /// `rows × neurons`
    pub z: Vec<f32>,
    /// `rows × classes × neurons`: `∂g(z)_c/∂z_i`
    pub jacobian: Vec<f64>,
    /// `rows × classes`
    pub probs: Vec<f64>,
}

impl Decomposition {
    pub fn from_net<'a>(
        net: &DenseNet,
        inputs: impl IntoIterator<Item = &'a [f32]>,
        layer: usize,
    ) -> Result<Self> {
        let neurons = net
            .layer_width(layer)
            .ok_or_else(|| NacError::InvalidArgument(format!("unknown layer {layer}")))?;
        let classes = net.class_count();
        let mut out = Self {
            layer_id: layer_id_for_tap(layer),
            rows: 0,
            neurons,
            classes,
            z: Vec::new(),
            jacobian: Vec::new(),
            probs: Vec::new(),
        };
        for x in inputs {
            let pass = net.forward_layer(x, layer)?;
            out.z.extend(pass.0.iter().map(|&v| v as f32));
            out.probs.extend_from_slice(pass.1.probs());
            for row in net.logit_jacobian(x, layer)? {
                out.jacobian.extend(row);
            }
            out.rows += 1;
        }
        Ok(out)
    }
}

/// `σ_α(Σ_c (z ⊙ ∂g(z)_c/∂z)·(p_c − 1/C))`, an independent route to the
/// same states as [`neuron_states`].
pub fn states_via_decomposition(d: &Decomposition, alpha: f64) -> Result<NeuronStateMatrix> {
    check_alpha(alpha)?;
    if d.classes < 2 {
        return Err(NacError::InvalidArgument(format!(
            "class count {} leaves the KL to uniform identically zero",
            d.classes
        )));
    }
    let (b, n, c) = (d.rows, d.neurons, d.classes);
    if d.z.len() != b * n || d.jacobian.len() != b * c * n || d.probs.len() != b * c {
        return Err(NacError::Dimension(format!(
            "decomposition shapes disagree for {b} rows, {n} neurons, {c} classes"
        )));
    }
    let u = 1.0 / c as f64;
    let mut values = Vec::with_capacity(b * n);
    for row in 0..b {
        let probs = &d.probs[row * c..(row + 1) * c];
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NacError::InvalidArgument(format!(
                "probabilities of row {row} sum to {sum}"
            )));
        }
        for i in 0..n {
            let zi = d.z[row * n + i] as f64;
            let mut acc = 0.0;
            for (class, p) in probs.iter().enumerate() {
                acc += zi * d.jacobian[(row * c + class) * n + i] * (p - u);
            }
            values.push(sigmoid_state(alpha, acc));
        }
    }
    NeuronStateMatrix::new(d.layer_id.clone(), b, n, values, alpha)
}
