//! Neuron activation coverage.
//!
//! Each neuron gets an `M`-bin histogram of the states observed on
//! in-distribution data. Coverage of a state is `min(O/O*, 1)` where `O` is
//! the count of the bin containing it and `O*` the fill threshold. From the
//! histograms we derive a per-sample uncertainty score (mean coverage over
//! neurons) and a per-model score (mean integral of coverage over `[0, 1]`).
//!
//! All neurons of a layer share one set of bin edges. Counting is exact
//! integer arithmetic, so fitting is order-insensitive and partial fits can
//! be merged.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Decoder, Encoder};
use crate::error::{NacError, Result};
use crate::netlab::PROB_FLOOR;
use crate::state::NeuronStateMatrix;

const MODEL_MAGIC: &[u8; 4] = b"NACM";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScale {
    /// Geometric spacing from `log_epsilon` up to 1; the first bin absorbs
    /// everything below.
    Log,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    /// Number of bins `M`.
    pub bins: usize,
    /// Fill threshold `O*`: count at which a bin is fully covered.
    pub fill_threshold: u64,
    pub bin_scale: BinScale,
    pub log_epsilon: f64,
    /// Informational: the caller fitted only correctly classified samples.
    pub correct_only: bool,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            fill_threshold: 50,
            bin_scale: BinScale::Uniform,
            log_epsilon: 1e-4,
            correct_only: false,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(NacError::InvalidArgument(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        if self.fill_threshold < 1 {
            return Err(NacError::InvalidArgument(
                "fill threshold must be at least 1".into(),
            ));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon <= 0.1) {
            return Err(NacError::InvalidArgument(format!(
                "log epsilon must lie in (0, 0.1], got {}",
                self.log_epsilon
            )));
        }
        Ok(())
    }

    /// `M + 1` ascending edges from 0 to 1.
    pub fn edges(&self) -> Vec<f64> {
        let m = self.bins;
        let mut edges = Vec::with_capacity(m + 1);
        edges.push(0.0);
        match self.bin_scale {
            BinScale::Uniform => edges.extend((1..m).map(|k| k as f64 / m as f64)),
            BinScale::Log => {
                let eps = self.log_epsilon;
                edges.extend((1..m).map(|k| eps * (1.0 / eps).powf(k as f64 / m as f64)));
            }
        }
        edges.push(1.0);
        edges
    }
}

/// What the histogrammed values are.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StateSource {
    /// Activation states `σ_α(z ⊙ ∂D_KL/∂z)`.
    ActivationState { alpha: f64 },
    /// Squashed raw outputs `σ_α(z)`.
    RawSquashed { alpha: f64 },
}

impl StateSource {
    pub fn alpha(self) -> f64 {
        match self {
            StateSource::ActivationState { alpha } | StateSource::RawSquashed { alpha } => alpha,
        }
    }
}

/// Read-only view of one neuron's histogram.
#[derive(Clone, Copy, Debug)]
pub struct CoverageHistogram<'a> {
    pub neuron_id: usize,
    pub edges: &'a [f64],
    pub counts: &'a [u64],
    pub total: u64,
}

impl CoverageHistogram<'_> {
    pub fn bin_width(&self, k: usize) -> f64 {
        self.edges[k + 1] - self.edges[k]
    }
}

/// Per-layer coverage histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageModel {
    layer_id: String,
    config: CoverageConfig,
    source: StateSource,
    edges: Vec<f64>,
    neurons: usize,
    /// `neurons × bins`, row-major.
    counts: Vec<u64>,
    total: u64,
    frozen: bool,
}

impl CoverageModel {
    /// An empty, unfrozen model.
    pub fn new(
        layer_id: impl Into<String>,
        neurons: usize,
        config: CoverageConfig,
        source: StateSource,
    ) -> Result<Self> {
        config.validate()?;
        if neurons == 0 {
            return Err(NacError::Dimension(
                "layer must have at least one neuron".into(),
            ));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            edges: config.edges(),
            counts: vec![0; neurons * config.bins],
            neurons,
            config,
            source,
            total: 0,
            frozen: false,
        })
    }

    /// Counts every batch of `stream` and returns the frozen model.
    pub fn fit<'a>(
        layer_id: impl Into<String>,
        neurons: usize,
        config: CoverageConfig,
        source: StateSource,
        stream: impl IntoIterator<Item = &'a NeuronStateMatrix>,
    ) -> Result<Self> {
        let mut model = Self::new(layer_id, neurons, config, source)?;
        for batch in stream {
            model.observe(batch)?;
        }
        model.freeze();
        Ok(model)
    }

    /// Same configuration, no observations, unfrozen.
    pub fn empty_like(&self) -> Self {
        Self {
            counts: vec![0; self.counts.len()],
            total: 0,
            frozen: false,
            ..self.clone()
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn source(&self) -> StateSource {
        self.source
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    /// Number of samples observed, `|X|`.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn counts(&self, neuron: usize) -> &[u64] {
        let m = self.config.bins;
        &self.counts[neuron * m..(neuron + 1) * m]
    }

    pub fn histogram(&self, neuron: usize) -> Result<CoverageHistogram<'_>> {
        self.check_neuron(neuron)?;
        Ok(CoverageHistogram {
            neuron_id: neuron,
            edges: &self.edges,
            counts: self.counts(neuron),
            total: self.total,
        })
    }

    /// Bin containing `value`: half-open `[e_k, e_{k+1})`, last bin closed.
    #[inline]
    pub fn bin_of(&self, value: f64) -> usize {
        let interior = &self.edges[1..self.config.bins];
        interior.partition_point(|&e| e <= value)
    }

    fn check_neuron(&self, neuron: usize) -> Result<()> {
        if neuron >= self.neurons {
            return Err(NacError::UnknownNeuron {
                neuron,
                neurons: self.neurons,
            });
        }
        Ok(())
    }

    fn check_states(&self, states: &NeuronStateMatrix) -> Result<()> {
        if states.layer_id() != self.layer_id {
            return Err(NacError::Incompatible(format!(
                "states belong to layer {:?}, model to {:?}",
                states.layer_id(),
                self.layer_id
            )));
        }
        if states.neurons() != self.neurons {
            return Err(NacError::Dimension(format!(
                "states have {} neurons, model has {}",
                states.neurons(),
                self.neurons
            )));
        }
        Ok(())
    }

    fn check_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(NacError::NotFrozen);
        }
        Ok(())
    }

    /// Adds one sample (one value per neuron).
    pub fn observe_row(&mut self, row: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(NacError::Frozen);
        }
        if row.len() != self.neurons {
            return Err(NacError::Dimension(format!(
                "row has {} values, model has {} neurons",
                row.len(),
                self.neurons
            )));
        }
        if let Some(i) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(NacError::InvalidArgument(format!(
                "value {} for neuron {i} is outside [0, 1]",
                row[i]
            )));
        }
        let m = self.config.bins;
        for (i, &v) in row.iter().enumerate() {
            let k = self.bin_of(v);
            self.counts[i * m + k] += 1;
        }
        self.total += 1;
        Ok(())
    }

    pub fn observe(&mut self, states: &NeuronStateMatrix) -> Result<()> {
        if self.frozen {
            return Err(NacError::Frozen);
        }
        self.check_states(states)?;
        for row in states.iter_rows() {
            self.observe_row(row)?;
        }
        Ok(())
    }

    /// Elementwise sum of two partial fits over the same layer and config.
    /// The result is frozen only if both inputs are.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.layer_id != other.layer_id {
            return Err(NacError::Incompatible(format!(
                "layers differ: {:?} vs {:?}",
                self.layer_id, other.layer_id
            )));
        }
        if self.config != other.config || self.edges != other.edges {
            return Err(NacError::Incompatible("coverage configs differ".into()));
        }
        if self.source != other.source {
            return Err(NacError::Incompatible("state sources differ".into()));
        }
        if self.neurons != other.neurons {
            return Err(NacError::Incompatible(format!(
                "neuron counts differ: {} vs {}",
                self.neurons, other.neurons
            )));
        }
        Ok(Self {
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
            total: self.total + other.total,
            frozen: self.frozen && other.frozen,
            ..self.clone()
        })
    }

    #[inline]
    fn coverage_of_count(&self, count: u64) -> f64 {
        (count as f64 / self.config.fill_threshold as f64).min(1.0)
    }

    /// Coverage `min(O(ẑ)/O*, 1)` of `state` for `neuron`.
    pub fn phi(&self, neuron: usize, state: f64) -> Result<f64> {
        self.check_frozen()?;
        self.check_neuron(neuron)?;
        if !(0.0..=1.0).contains(&state) {
            return Err(NacError::InvalidArgument(format!(
                "state {state} is outside [0, 1]"
            )));
        }
        Ok(self.coverage_of_count(self.counts(neuron)[self.bin_of(state)]))
    }

    /// Implied density lower bound `r = O*/(|X|·h_k)` for bin `k`.
    pub fn implied_rate(&self, bin: usize) -> f64 {
        let h = self.edges[bin + 1] - self.edges[bin];
        self.config.fill_threshold as f64 / (self.total as f64 * h)
    }

    /// Mean coverage over neurons for every sample.
    pub fn nac_ue(&self, states: &NeuronStateMatrix) -> Result<Vec<f64>> {
        self.check_frozen()?;
        self.check_states(states)?;
        let n = self.neurons as f64;
        Ok(states
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(i, &s)| self.coverage_of_count(self.counts(i)[self.bin_of(s)]))
                    .sum::<f64>()
                    / n
            })
            .collect())
    }

    /// Mean over neurons of the integral of coverage over `[0, 1]`,
    /// evaluated as the bin sum `(1/(M·N)) Σ_i Σ_k min(O_ik/O*, 1)`.
    pub fn nac_me(&self) -> Result<f64> {
        self.check_frozen()?;
        let sum: f64 = self.counts.iter().map(|&c| self.coverage_of_count(c)).sum();
        Ok(sum / (self.config.bins * self.neurons) as f64)
    }

    /// Batch mean of `H = −Σ_i p_i log p_i`, with `p_i` the fraction of
    /// observations sharing the bin of the sample's value for neuron `i`.
    pub fn nac_entropy(&self, states: &NeuronStateMatrix) -> Result<f64> {
        self.check_frozen()?;
        self.check_states(states)?;
        if self.total == 0 {
            return Err(NacError::Undefined(
                "entropy of an empty coverage model".into(),
            ));
        }
        if states.rows() == 0 {
            return Ok(0.0);
        }
        let total = self.total as f64;
        let mut sum = 0.0;
        for row in states.iter_rows() {
            for (i, &s) in row.iter().enumerate() {
                let p = (self.counts(i)[self.bin_of(s)] as f64 / total).max(PROB_FLOOR);
                sum -= p * p.ln();
            }
        }
        Ok(sum / states.rows() as f64)
    }

    /// Bin probability mass at `value`, linearly interpolated between bin
    /// centres, and its derivative in `value`. Used for the differentiable
    /// entropy term during training.
    pub fn interpolated_mass(&self, neuron: usize, value: f64) -> (f64, f64) {
        let m = self.config.bins;
        let counts = self.counts(neuron);
        let total = self.total.max(1) as f64;
        let mass = |k: usize| (counts[k] as f64 / total).max(PROB_FLOOR);
        let centre = |k: usize| 0.5 * (self.edges[k] + self.edges[k + 1]);
        if value <= centre(0) {
            return (mass(0), 0.0);
        }
        if value >= centre(m - 1) {
            return (mass(m - 1), 0.0);
        }
        let k = self.bin_of(value);
        let (lo, hi) = if value >= centre(k) {
            (k, k + 1)
        } else {
            (k - 1, k)
        };
        let (c0, c1) = (centre(lo), centre(hi));
        let slope = (mass(hi) - mass(lo)) / (c1 - c0);
        (mass(lo) + slope * (value - c0), slope)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut enc = Encoder::new();
        enc.bytes(MODEL_MAGIC);
        enc.u32(MODEL_VERSION);
        enc.str16(&self.layer_id)?;
        enc.u32(self.config.bins as u32);
        enc.u64(self.config.fill_threshold);
        enc.u8(match self.config.bin_scale {
            BinScale::Uniform => 0,
            BinScale::Log => 1,
        });
        enc.f64(self.config.log_epsilon);
        enc.u8(self.config.correct_only as u8);
        let (tag, alpha) = match self.source {
            StateSource::ActivationState { alpha } => (0, alpha),
            StateSource::RawSquashed { alpha } => (1, alpha),
        };
        enc.u8(tag);
        enc.f64(alpha);
        enc.u32(self.neurons as u32);
        for e in &self.edges {
            enc.f64(*e);
        }
        enc.u64s(&self.counts);
        enc.u64(self.total);
        enc.u8(self.frozen as u8);
        Ok(enc.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.magic(MODEL_MAGIC)?;
        let at = dec.offset();
        let version = dec.u32()?;
        if version != MODEL_VERSION {
            return Err(NacError::Format {
                offset: at,
                message: format!("unsupported coverage model version {version}"),
            });
        }
        let layer_id = dec.str16()?;
        let bins = dec.u32()? as usize;
        let fill_threshold = dec.u64()?;
        let at = dec.offset();
        let bin_scale = match dec.u8()? {
            0 => BinScale::Uniform,
            1 => BinScale::Log,
            t => {
                return Err(NacError::Format {
                    offset: at,
                    message: format!("unknown bin scale tag {t}"),
                })
            }
        };
        let log_epsilon = dec.f64()?;
        let correct_only = dec.u8()? != 0;
        let at = dec.offset();
        let tag = dec.u8()?;
        let alpha = dec.f64()?;
        let source = match tag {
            0 => StateSource::ActivationState { alpha },
            1 => StateSource::RawSquashed { alpha },
            t => {
                return Err(NacError::Format {
                    offset: at,
                    message: format!("unknown state source tag {t}"),
                })
            }
        };
        let config = CoverageConfig {
            bins,
            fill_threshold,
            bin_scale,
            log_epsilon,
            correct_only,
        };
        config.validate().map_err(|e| dec.err(e.to_string()))?;
        let neurons = dec.u32()? as usize;
        let at = dec.offset();
        let mut edges = Vec::with_capacity(bins + 1);
        for _ in 0..=bins {
            edges.push(dec.f64()?);
        }
        if edges[0] != 0.0 || edges[bins] != 1.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NacError::Format {
                offset: at,
                message: "bin edges must increase strictly from 0 to 1".into(),
            });
        }
        let at = dec.offset();
        let counts = dec.u64s(neurons * bins)?;
        let total = dec.u64()?;
        let frozen = dec.u8()? != 0;
        dec.finish()?;
        if counts
            .chunks_exact(bins)
            .any(|c| c.iter().sum::<u64>() != total)
        {
            return Err(NacError::Format {
                offset: at,
                message: "per-neuron counts do not sum to the sample total".into(),
            });
        }
        Ok(Self {
            layer_id,
            config,
            source,
            edges,
            neurons,
            counts,
            total,
            frozen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    InDistribution,
    OutOfDistribution,
}

/// Per-layer uncertainty scores, their weighted sum and optional decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub per_layer_scores: BTreeMap<String, Vec<f64>>,
    pub layer_weights: BTreeMap<String, f64>,
    pub fused: Vec<f64>,
    pub threshold: Option<f64>,
    pub decisions: Option<Vec<Decision>>,
}

/// Weighted sum of per-layer scores; layers without an explicit weight get
/// weight 1. With a threshold, samples scoring `≥ threshold` are in-distribution.
pub fn fuse_layers(
    per_layer: BTreeMap<String, Vec<f64>>,
    weights: &BTreeMap<String, f64>,
    threshold: Option<f64>,
) -> Result<ScoreReport> {
    if per_layer.is_empty() {
        return Err(NacError::InvalidArgument("no layer scores to fuse".into()));
    }
    if let Some(unknown) = weights.keys().find(|k| !per_layer.contains_key(*k)) {
        return Err(NacError::InvalidArgument(format!(
            "weight given for unknown layer {unknown:?}"
        )));
    }
    let len = per_layer.values().next().unwrap().len();
    if let Some((id, v)) = per_layer.iter().find(|(_, v)| v.len() != len) {
        return Err(NacError::Dimension(format!(
            "layer {id:?} has {} scores, expected {len}",
            v.len()
        )));
    }
    let mut layer_weights = BTreeMap::new();
    for id in per_layer.keys() {
        let w = weights.get(id).copied().unwrap_or(1.0);
        if !(w >= 0.0 && w.is_finite()) {
            return Err(NacError::InvalidArgument(format!(
                "weight {w} for layer {id:?} must be non-negative"
            )));
        }
        layer_weights.insert(id.clone(), w);
    }
    let mut fused = vec![0.0; len];
    for (id, scores) in &per_layer {
        let w = layer_weights[id];
        for (f, s) in fused.iter_mut().zip(scores) {
            *f += w * s;
        }
    }
    let decisions = threshold.map(|t| {
        fused
            .iter()
            .map(|&f| {
                if f >= t {
                    Decision::InDistribution
                } else {
                    Decision::OutOfDistribution
                }
            })
            .collect()
    });
    Ok(ScoreReport {
        per_layer_scores: per_layer,
        layer_weights,
        fused,
        threshold,
        decisions,
    })
}
