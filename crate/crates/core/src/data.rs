//! Labeled sample sets, seeded synthetic InD/OOD tasks and the NACT
//! activation-dump format.
//!
//! NACT layout (little-endian, row-major):
//!
//! ```text
//! "NACT" | u32 version = 1 | u16 len + UTF-8 layer id | u32 N | u64 B | u32 C
//! | z: B×N f32 | grad: B×N f32 | labels: B u32 | logits: B×C f32
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Decoder, Encoder};
use crate::error::{NacError, Result};
use crate::netlab::{argmax, DenseNet, LogitBundle};
use crate::state::{layer_id_for_tap, RawLayerBatch};

/// Label value marking a sample without an in-distribution label.
pub const UNLABELED: u32 = u32::MAX;

const DUMP_MAGIC: &[u8; 4] = b"NACT";
const DUMP_VERSION: u32 = 1;

/// Row-major inputs with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    dims: usize,
    inputs: Vec<f32>,
    labels: Vec<u32>,
}

impl LabeledSet {
    pub fn new(dims: usize, inputs: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if dims == 0 {
            return Err(NacError::Dimension(
                "inputs need at least one feature".into(),
            ));
        }
        if inputs.len() != dims * labels.len() {
            return Err(NacError::Dimension(format!(
                "{} labels need {} input values, got {}",
                labels.len(),
                dims * labels.len(),
                inputs.len()
            )));
        }
        Ok(Self {
            dims,
            inputs,
            labels,
        })
    }

    pub fn empty(dims: usize) -> Self {
        Self {
            dims,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dims..(i + 1) * self.dims]
    }

    pub fn get(&self, i: usize) -> (&[f32], u32) {
        (self.input(i), self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], u32)> {
        self.inputs
            .chunks_exact(self.dims)
            .zip(self.labels.iter().copied())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.inputs.chunks_exact(self.dims)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(rows.len() * self.dims);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(self.input(r));
            labels.push(self.labels[r]);
        }
        Self {
            dims: self.dims,
            inputs,
            labels,
        }
    }

    fn push(&mut self, x: &[f64], label: u32) {
        self.inputs.extend(x.iter().map(|&v| v as f32));
        self.labels.push(label);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Some blobs are withheld from training and form the OOD sets.
    HeldoutClass,
    /// OOD sets are the in-distribution classes under a fixed rotation and
    /// translation.
    CovariateShift,
}

/// Parameters of a synthetic Gaussian-blob task.
///
/// Blob centres sit on a circle of radius `separation` in the first two
/// input dimensions, evenly spaced; remaining dimensions are centred at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dims: usize,
    /// In-distribution class count `C`.
    pub classes: usize,
    /// Blobs withheld as OOD (held-out-class tasks only).
    pub heldout: usize,
    pub separation: f64,
    /// Per-coordinate standard deviation of every blob.
    pub spread: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Samples in each of the OOD validation and test sets.
    pub ood_size: usize,
    /// Rotation (radians, first two dimensions) applied to shifted copies.
    pub shift_angle: f64,
    /// Translation added to every coordinate of shifted copies.
    pub shift_offset: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn heldout(seed: u64) -> Self {
        Self {
            kind: TaskKind::HeldoutClass,
            dims: 2,
            classes: 3,
            heldout: 1,
            separation: 4.0,
            spread: 1.0,
            train_per_class: 10_000,
            val_per_class: 200,
            test_per_class: 500,
            ood_size: 500,
            shift_angle: 0.0,
            shift_offset: 0.0,
            seed,
        }
    }

    pub fn shift(seed: u64) -> Self {
        Self {
            kind: TaskKind::CovariateShift,
            heldout: 0,
            shift_angle: PI / 6.0,
            shift_offset: 0.5,
            train_per_class: 1000,
            ..Self::heldout(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(NacError::InvalidArgument("need at least 2 classes".into()));
        }
        if self.dims < 2 {
            return Err(NacError::InvalidArgument(
                "need at least 2 input dimensions".into(),
            ));
        }
        if self.kind == TaskKind::HeldoutClass && self.heldout == 0 {
            return Err(NacError::InvalidArgument(
                "held-out-class task needs at least one held-out blob".into(),
            ));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) || !self.separation.is_finite() {
            return Err(NacError::InvalidArgument(
                "spread must be positive and finite".into(),
            ));
        }
        if self.train_per_class == 0 {
            return Err(NacError::InvalidArgument("training set is empty".into()));
        }
        Ok(())
    }

    fn blob_count(&self) -> usize {
        match self.kind {
            TaskKind::HeldoutClass => self.classes + self.heldout,
            TaskKind::CovariateShift => self.classes,
        }
    }

    fn centre(&self, blob: usize) -> Vec<f64> {
        let angle = 2.0 * PI * blob as f64 / self.blob_count() as f64;
        let mut c = vec![0.0; self.dims];
        c[0] = self.separation * angle.cos();
        c[1] = self.separation * angle.sin();
        c
    }
}

/// A generated task. All sets are drawn independently.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub ind_train: LabeledSet,
    pub ind_val: LabeledSet,
    pub ind_test: LabeledSet,
    pub ood_val: LabeledSet,
    pub ood_test: LabeledSet,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.spread).expect("validated spread");
    let sample = |blob: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        spec.centre(blob)
            .into_iter()
            .map(|c| c + noise.sample(rng))
            .collect()
    };
    let ind = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut set = LabeledSet::empty(spec.dims);
        let mut labels: Vec<u32> = (0..spec.classes as u32)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        labels.shuffle(rng);
        for y in labels {
            let x = sample(y as usize, rng);
            set.push(&x, y);
        }
        set
    };
    let ind_train = ind(spec.train_per_class, &mut rng);
    let ind_val = ind(spec.val_per_class, &mut rng);
    let ind_test = ind(spec.test_per_class, &mut rng);

    let (sin, cos) = spec.shift_angle.sin_cos();
    let ood = |rng: &mut ChaCha8Rng| {
        let mut set = LabeledSet::empty(spec.dims);
        for i in 0..spec.ood_size {
            match spec.kind {
                TaskKind::HeldoutClass => {
                    let blob = spec.classes + i % spec.heldout;
                    let x = sample(blob, rng);
                    set.push(&x, blob as u32);
                }
                TaskKind::CovariateShift => {
                    let y = i % spec.classes;
                    let mut x = sample(y, rng);
                    let (a, b) = (x[0], x[1]);
                    x[0] = cos * a - sin * b;
                    x[1] = sin * a + cos * b;
                    x.iter_mut().for_each(|v| *v += spec.shift_offset);
                    set.push(&x, y as u32);
                }
            }
        }
        set
    };
    let ood_val = ood(&mut rng);
    let ood_test = ood(&mut rng);
    Ok(SyntheticTask {
        spec: spec.clone(),
        ind_train,
        ind_val,
        ind_test,
        ood_val,
        ood_test,
    })
}

/// Exported `(z, ∂D_KL/∂z, label, logits)` of one layer over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer_id: String,
    pub neurons: usize,
    pub rows: usize,
    pub classes: usize,
    pub z: Vec<f32>,
    pub grad: Vec<f32>,
    pub labels: Vec<u32>,
    pub logits: Vec<f32>,
}

impl ActivationDump {
    pub fn validate(&self) -> Result<()> {
        let (b, n, c) = (self.rows, self.neurons, self.classes);
        if self.z.len() != b * n
            || self.grad.len() != b * n
            || self.labels.len() != b
            || self.logits.len() != b * c
        {
            return Err(NacError::Dimension(format!(
                "dump arrays disagree with B={b}, N={n}, C={c}"
            )));
        }
        for (name, arr, width) in [
            ("z", &self.z, n),
            ("grad", &self.grad, n),
            ("logits", &self.logits, c),
        ] {
            if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
                log::debug!("non-finite {name} entry");
                return Err(NacError::NonFinite {
                    row: i / width.max(1),
                    col: i % width.max(1),
                });
            }
        }
        Ok(())
    }

    pub fn raw_batch(&self) -> Result<RawLayerBatch> {
        RawLayerBatch::new(
            self.layer_id.clone(),
            self.rows,
            self.neurons,
            self.z.clone(),
            self.grad.clone(),
        )
    }

    pub fn logits_row(&self, row: usize) -> &[f32] {
        &self.logits[row * self.classes..(row + 1) * self.classes]
    }

    pub fn bundle(&self, row: usize) -> Result<LogitBundle> {
        LogitBundle::from_logits_f32(self.logits_row(row))
    }

    pub fn predicted(&self, row: usize) -> usize {
        let l: Vec<f64> = self.logits_row(row).iter().map(|&v| v as f64).collect();
        argmax(&l)
    }

    /// Rows whose label is a valid class that the model predicts.
    pub fn correct_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&r| {
                let y = self.labels[r];
                y != UNLABELED && (y as usize) < self.classes && self.predicted(r) == y as usize
            })
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let (n, c) = (self.neurons, self.classes);
        let mut out = Self {
            layer_id: self.layer_id.clone(),
            neurons: n,
            rows: rows.len(),
            classes: c,
            z: Vec::with_capacity(rows.len() * n),
            grad: Vec::with_capacity(rows.len() * n),
            labels: Vec::with_capacity(rows.len()),
            logits: Vec::with_capacity(rows.len() * c),
        };
        for &r in rows {
            out.z.extend_from_slice(&self.z[r * n..(r + 1) * n]);
            out.grad.extend_from_slice(&self.grad[r * n..(r + 1) * n]);
            out.labels.push(self.labels[r]);
            out.logits.extend_from_slice(self.logits_row(r));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut enc = Encoder::new();
        enc.bytes(DUMP_MAGIC);
        enc.u32(DUMP_VERSION);
        enc.str16(&self.layer_id)?;
        enc.u32(self.neurons as u32);
        enc.u64(self.rows as u64);
        enc.u32(self.classes as u32);
        enc.f32s(&self.z);
        enc.f32s(&self.grad);
        enc.u32s(&self.labels);
        enc.f32s(&self.logits);
        Ok(enc.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.magic(DUMP_MAGIC)?;
        let at = dec.offset();
        let version = dec.u32()?;
        if version != DUMP_VERSION {
            return Err(NacError::Format {
                offset: at,
                message: format!("unsupported NACT version {version}"),
            });
        }
        let layer_id = dec.str16()?;
        let neurons = dec.u32()? as usize;
        let rows = dec.u64()?;
        let classes = dec.u32()? as usize;
        let payload = (rows as u128) * (2 * neurons as u128 + 1 + classes as u128) * 4;
        let expected = dec.offset() as u128 + payload;
        if expected != bytes.len() as u128 {
            if expected > bytes.len() as u128 {
                return Err(NacError::Truncated {
                    expected: expected.min(u64::MAX as u128) as u64,
                    actual: bytes.len() as u64,
                });
            }
            return Err(NacError::Format {
                offset: expected as u64,
                message: format!("{} trailing bytes", bytes.len() as u128 - expected),
            });
        }
        let rows = rows as usize;
        let dump = Self {
            z: dec.f32s(rows * neurons)?,
            grad: dec.f32s(rows * neurons)?,
            labels: dec.u32s(rows)?,
            logits: dec.f32s(rows * classes)?,
            layer_id,
            neurons,
            rows,
            classes,
        };
        dec.finish()?;
        dump.validate()?;
        Ok(dump)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One dump per tap of `net`, computed with a single forward and backward
/// pass per sample.
pub fn dumps_from_net(net: &DenseNet, set: &LabeledSet) -> Result<Vec<ActivationDump>> {
    let classes = net.class_count();
    let mut dumps: Vec<ActivationDump> = net
        .taps()
        .iter()
        .map(|&t| ActivationDump {
            layer_id: layer_id_for_tap(t),
            neurons: net.layer_width(t).unwrap(),
            rows: set.len(),
            classes,
            z: Vec::new(),
            grad: Vec::new(),
            labels: set.labels().to_vec(),
            logits: Vec::with_capacity(set.len() * classes),
        })
        .collect();
    for x in set.rows() {
        let out = net.backward_kl(x)?;
        let logits: Vec<f32> = out.bundle.logits().iter().map(|&v| v as f32).collect();
        for (dump, &tap) in dumps.iter_mut().zip(net.taps()) {
            dump.z.extend_from_slice(&out.activations[&tap]);
            dump.grad.extend_from_slice(&out.gradients[&tap]);
            dump.logits.extend_from_slice(&logits);
        }
    }
    Ok(dumps)
}
