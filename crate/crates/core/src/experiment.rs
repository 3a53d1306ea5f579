//! End-to-end drivers shared by the CLI and the acceptance suite: training
//! toy models on synthetic tasks, fitting per-layer coverage, detection
//! evaluation, checkpoint ranking and hyperparameter sweeps.
//!
//! Everything downstream of the network works on [`ActivationDump`]s, so the
//! same code path serves dumps exported from external models.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{fuse_layers, CoverageConfig, CoverageModel, ScoreReport, StateSource};
use crate::data::{dumps_from_net, make_task, ActivationDump, SyntheticTask, TaskKind, TaskSpec};
use crate::error::{NacError, Result};
use crate::metrics::{energy_score, msp_score, spearman_rc, DetectionEval, RankEval};
use crate::netlab::{train_with, DenseNet, TrainConfig};
use crate::state::{layer_id_for_tap, neuron_states, NeuronStateMatrix};

/// Coverage hyperparameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSettings {
    pub layer_id: String,
    pub alpha: f64,
    pub coverage: CoverageConfig,
    /// Weight of this layer in the fused score.
    pub weight: f64,
}

impl LayerSettings {
    pub fn new(layer_id: impl Into<String>, alpha: f64, coverage: CoverageConfig) -> Self {
        Self {
            layer_id: layer_id.into(),
            alpha,
            coverage,
            weight: 1.0,
        }
    }
}

/// Dumps of every tapped layer over one dataset split (same rows).
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDumps {
    pub dumps: Vec<ActivationDump>,
}

impl SplitDumps {
    pub fn new(dumps: Vec<ActivationDump>) -> Result<Self> {
        let first = dumps
            .first()
            .ok_or_else(|| NacError::InvalidArgument("no layer dumps supplied".into()))?;
        for d in &dumps {
            d.validate()?;
            if d.rows != first.rows || d.labels != first.labels || d.logits != first.logits {
                return Err(NacError::Incompatible(format!(
                    "dump for {:?} does not cover the same samples as {:?}",
                    d.layer_id, first.layer_id
                )));
            }
        }
        Ok(Self { dumps })
    }

    pub fn from_net(net: &DenseNet, set: &crate::data::LabeledSet) -> Result<Self> {
        Self::new(dumps_from_net(net, set)?)
    }

    pub fn rows(&self) -> usize {
        self.dumps[0].rows
    }

    pub fn layer(&self, layer_id: &str) -> Result<&ActivationDump> {
        self.dumps
            .iter()
            .find(|d| d.layer_id == layer_id)
            .ok_or_else(|| {
                NacError::InvalidArgument(format!("no activations for layer {layer_id:?}"))
            })
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.dumps.iter().map(|d| d.layer_id.clone()).collect()
    }

    pub fn msp(&self) -> Result<Vec<f64>> {
        let d = &self.dumps[0];
        (0..d.rows).map(|r| Ok(msp_score(&d.bundle(r)?))).collect()
    }

    pub fn energy(&self) -> Result<Vec<f64>> {
        let d = &self.dumps[0];
        (0..d.rows)
            .map(|r| Ok(energy_score(&d.bundle(r)?)))
            .collect()
    }

    /// Fraction of labelled rows whose prediction matches the label.
    pub fn accuracy(&self) -> f64 {
        let d = &self.dumps[0];
        if d.rows == 0 {
            return 0.0;
        }
        d.correct_rows().len() as f64 / d.rows as f64
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            dumps: self.dumps.iter().map(|d| d.select(rows)).collect(),
        }
    }
}

pub fn layer_states(dump: &ActivationDump, alpha: f64) -> Result<NeuronStateMatrix> {
    neuron_states(&dump.raw_batch()?, alpha)
}

/// Fits one layer's coverage model, honouring `correct_only`.
pub fn fit_layer(dump: &ActivationDump, settings: &LayerSettings) -> Result<CoverageModel> {
    let owned;
    let dump = if settings.coverage.correct_only {
        owned = dump.select(&dump.correct_rows());
        &owned
    } else {
        dump
    };
    if (dump.rows as u64) < settings.coverage.fill_threshold {
        log::warn!(
            "layer {}: fill threshold {} exceeds the {} fitting samples; no bin can reach full coverage",
            settings.layer_id,
            settings.coverage.fill_threshold,
            dump.rows
        );
    }
    let states = layer_states(dump, settings.alpha)?;
    CoverageModel::fit(
        settings.layer_id.clone(),
        dump.neurons,
        settings.coverage.clone(),
        StateSource::ActivationState {
            alpha: settings.alpha,
        },
        [&states],
    )
}

/// Fitted per-layer coverage models and their fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NacDetector {
    pub layers: Vec<(LayerSettings, CoverageModel)>,
}

impl NacDetector {
    pub fn fit(train: &SplitDumps, settings: &[LayerSettings]) -> Result<Self> {
        if settings.is_empty() {
            return Err(NacError::InvalidArgument("no layers selected".into()));
        }
        let layers = settings
            .iter()
            .map(|s| Ok((s.clone(), fit_layer(train.layer(&s.layer_id)?, s)?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_models(
        models: Vec<CoverageModel>,
        weights: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let layers = models
            .into_iter()
            .map(|m| {
                let mut s =
                    LayerSettings::new(m.layer_id(), m.source().alpha(), m.config().clone());
                if let StateSource::RawSquashed { .. } = m.source() {
                    return Err(NacError::InvalidArgument(format!(
                        "model for {:?} was fitted over raw outputs, not activation states",
                        m.layer_id()
                    )));
                }
                s.weight = weights.get(m.layer_id()).copied().unwrap_or(1.0);
                Ok((s, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn score(&self, split: &SplitDumps, threshold: Option<f64>) -> Result<ScoreReport> {
        let mut per_layer = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for (s, model) in &self.layers {
            let states = layer_states(split.layer(&s.layer_id)?, s.alpha)?;
            per_layer.insert(s.layer_id.clone(), model.nac_ue(&states)?);
            weights.insert(s.layer_id.clone(), s.weight);
        }
        fuse_layers(per_layer, &weights, threshold)
    }

    pub fn fused(&self, split: &SplitDumps) -> Result<Vec<f64>> {
        Ok(self.score(split, None)?.fused)
    }
}

/// Default network and training schedule for a synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Steps between saved checkpoints.
    pub checkpoint_every: usize,
}

impl Recipe {
    pub fn for_task(kind: TaskKind, seed: u64) -> Self {
        match kind {
            TaskKind::HeldoutClass => Self {
                hidden: vec![32, 32],
                train: TrainConfig {
                    learning_rate: 0.05,
                    steps: 3000,
                    batch_size: 32,
                    seed,
                    ..TrainConfig::default()
                },
                checkpoint_every: 300,
            },
            TaskKind::CovariateShift => Self {
                hidden: vec![32, 32],
                train: TrainConfig {
                    learning_rate: 0.001,
                    steps: 5000,
                    batch_size: 32,
                    seed,
                    ..TrainConfig::default()
                },
                checkpoint_every: 300,
            },
        }
    }

    pub fn widths(&self, task: &SyntheticTask) -> Vec<usize> {
        let mut w = vec![task.spec.dims];
        w.extend(&self.hidden);
        w.push(task.spec.classes);
        w
    }

    pub fn init_net(&self, task: &SyntheticTask) -> Result<DenseNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ 0x9e37_79b9_7f4a_7c15);
        let taps = (0..self.hidden.len()).collect();
        DenseNet::init(&self.widths(task), taps, &mut rng)
    }
}

pub fn default_task(kind: TaskKind, seed: u64) -> TaskSpec {
    match kind {
        TaskKind::HeldoutClass => TaskSpec::heldout(seed),
        TaskKind::CovariateShift => TaskSpec::shift(seed),
    }
}

/// Layer settings for every tap of a network from the default
/// hyperparameters.
pub fn default_layer_settings(net: &DenseNet) -> Vec<LayerSettings> {
    net.taps()
        .iter()
        .map(|&t| LayerSettings::new(layer_id_for_tap(t), 100.0, CoverageConfig::default()))
        .collect()
}

/// A trained model, its training checkpoints and per-split activations.
pub struct TaskRun {
    pub task: SyntheticTask,
    pub net: DenseNet,
    /// `(step, network)` every `checkpoint_every` steps, including step 0
    /// and the final step.
    pub checkpoints: Vec<(usize, DenseNet)>,
    pub loss_trace: Vec<f64>,
}

pub fn train_task(spec: &TaskSpec, recipe: &Recipe) -> Result<TaskRun> {
    let task = make_task(spec)?;
    let mut net = recipe.init_net(&task)?;
    let mut checkpoints = Vec::new();
    let every = recipe.checkpoint_every.max(1);
    let steps = recipe.train.steps;
    let report = train_with(&mut net, &task.ind_train, &recipe.train, None, |step, n| {
        if step % every == 0 || step == steps {
            checkpoints.push((step, n.clone()));
        }
    })?;
    Ok(TaskRun {
        task,
        net,
        checkpoints,
        loss_trace: report.loss_trace,
    })
}

/// Activations of one network over every split of a task.
pub struct TaskDumps {
    pub train: SplitDumps,
    pub val: SplitDumps,
    pub test: SplitDumps,
    pub ood_val: SplitDumps,
    pub ood_test: SplitDumps,
}

impl TaskDumps {
    pub fn collect(net: &DenseNet, task: &SyntheticTask) -> Result<Self> {
        Ok(Self {
            train: SplitDumps::from_net(net, &task.ind_train)?,
            val: SplitDumps::from_net(net, &task.ind_val)?,
            test: SplitDumps::from_net(net, &task.ind_test)?,
            ood_val: SplitDumps::from_net(net, &task.ood_val)?,
            ood_test: SplitDumps::from_net(net, &task.ood_test)?,
        })
    }
}

/// Seeded choice of `⌈frac·rows⌉` rows (at least one).
pub fn subset_rows(rows: usize, frac: f64, seed: u64) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(NacError::InvalidArgument(format!(
            "subset fraction must lie in (0, 1], got {frac}"
        )));
    }
    if frac >= 1.0 {
        return Ok((0..rows).collect());
    }
    let k = ((rows as f64 * frac).ceil() as usize).clamp(1, rows.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, rows, k.min(rows)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One row of a detection table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub method: String,
    pub layers: String,
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold: f64,
    pub mean_ind: f64,
    pub mean_ood: f64,
}

impl DetectionRow {
    fn new(method: &str, layers: &str, eval: &DetectionEval) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            method: method.into(),
            layers: layers.into(),
            auroc: eval.auroc,
            fpr95: eval.fpr95,
            threshold: eval.threshold_at_tpr95,
            mean_ind: mean(&eval.ind_scores),
            mean_ood: mean(&eval.ood_scores),
        }
    }
}

pub const DETECTION_CSV_HEADER: &str = "method,layers,auroc,fpr95,threshold,mean_ind,mean_ood";

pub fn detection_csv(rows: &[DetectionRow]) -> String {
    let mut out = String::from(DETECTION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.layers, r.auroc, r.fpr95, r.threshold, r.mean_ind, r.mean_ood
        );
    }
    out
}

pub fn detection_table(rows: &[DetectionRow]) -> String {
    let mut out = format!(
        "{:<10} {:<28} {:>8} {:>8}\n",
        "method", "layers", "AUROC", "FPR95"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<28} {:>8.4} {:>8.4}",
            r.method, r.layers, r.auroc, r.fpr95
        );
    }
    out
}

/// NAC-UE for growing layer sets (deepest layer first, one layer added per
/// row) followed by the MSP and energy baselines.
pub fn evaluate_detection(
    detector: &NacDetector,
    ind: &SplitDumps,
    ood: &SplitDumps,
    tpr: f64,
) -> Result<Vec<DetectionRow>> {
    if ind.rows() == 0 || ood.rows() == 0 {
        return Err(NacError::InvalidArgument(
            "detection needs non-empty in-distribution and OOD sets".into(),
        ));
    }
    let ind_report = detector.score(ind, None)?;
    let ood_report = detector.score(ood, None)?;
    let mut order: Vec<&LayerSettings> = detector.layers.iter().map(|(s, _)| s).collect();
    order.reverse();
    let mut rows = Vec::new();
    for k in 1..=order.len() {
        let used = &order[..k];
        let ids: Vec<String> = used.iter().map(|s| s.layer_id.clone()).collect();
        let weights: Vec<f64> = used.iter().map(|s| s.weight).collect();
        let eval = DetectionEval::new(
            weighted_fuse(&ind_report, &ids, &weights),
            weighted_fuse(&ood_report, &ids, &weights),
            tpr,
        )?;
        rows.push(DetectionRow::new("nac-ue", &ids.join("+"), &eval));
    }
    let logits = "logits";
    let eval = DetectionEval::new(ind.msp()?, ood.msp()?, tpr)?;
    rows.push(DetectionRow::new("msp", logits, &eval));
    let eval = DetectionEval::new(ind.energy()?, ood.energy()?, tpr)?;
    rows.push(DetectionRow::new("energy", logits, &eval));
    Ok(rows)
}

/// Mean NAC-ME over the configured layers, fitted on `train`.
pub fn model_score(train: &SplitDumps, settings: &[LayerSettings]) -> Result<f64> {
    let detector = NacDetector::fit(train, settings)?;
    let mut sum = 0.0;
    for (_, m) in &detector.layers {
        sum += m.nac_me()?;
    }
    Ok(sum / detector.layers.len() as f64)
}

/// Criteria and accuracies of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub step: usize,
    pub nac_me: f64,
    pub val_acc: f64,
    pub ood_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub checkpoints: Vec<CheckpointRow>,
    pub nac_me: RankEval,
    pub val_acc: RankEval,
}

/// Per-checkpoint training-set activations and accuracies, computed once so
/// that many coverage settings can be scored cheaply.
pub struct CheckpointSet {
    pub steps: Vec<usize>,
    pub train: Vec<SplitDumps>,
    pub val_acc: Vec<f64>,
    pub ood_acc: Vec<f64>,
}

impl CheckpointSet {
    pub fn collect(checkpoints: &[(usize, DenseNet)], task: &SyntheticTask) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(NacError::InvalidArgument("no checkpoints to rank".into()));
        }
        let mut set = Self {
            steps: Vec::new(),
            train: Vec::new(),
            val_acc: Vec::new(),
            ood_acc: Vec::new(),
        };
        for (step, net) in checkpoints {
            set.steps.push(*step);
            set.train.push(SplitDumps::from_net(net, &task.ind_train)?);
            set.val_acc.push(net.accuracy(&task.ind_val)?);
            set.ood_acc.push(net.accuracy(&task.ood_test)?);
        }
        Ok(set)
    }

    /// Scores every checkpoint with NAC-ME and InD validation accuracy and
    /// ranks both against OOD test accuracy.
    pub fn rank(&self, settings: &[LayerSettings]) -> Result<ModelRanking> {
        let mut rows = Vec::with_capacity(self.steps.len());
        for i in 0..self.steps.len() {
            rows.push(CheckpointRow {
                step: self.steps[i],
                nac_me: model_score(&self.train[i], settings)?,
                val_acc: self.val_acc[i],
                ood_acc: self.ood_acc[i],
            });
        }
        let nac_me = RankEval::new(
            rows.iter().map(|r| r.nac_me).collect(),
            self.ood_acc.clone(),
        )?;
        let val_acc = RankEval::new(self.val_acc.clone(), self.ood_acc.clone())?;
        Ok(ModelRanking {
            checkpoints: rows,
            nac_me,
            val_acc,
        })
    }
}

/// Candidate NAC-ME settings; every combination is tried.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeGrid {
    pub alphas: Vec<f64>,
    pub fills: Vec<u64>,
    pub layer_sets: Vec<Vec<String>>,
    pub base: CoverageConfig,
}

impl MeGrid {
    /// α ∈ {0.01, 1, 100}, O* ∈ {5, 50, 500}, deepest tap / first tap / all
    /// taps, fitted on correctly classified training samples.
    pub fn default_for(layer_ids: &[String]) -> Self {
        let mut layer_sets = vec![vec![layer_ids.last().cloned().unwrap_or_default()]];
        if layer_ids.len() > 1 {
            layer_sets.push(vec![layer_ids[0].clone()]);
            layer_sets.push(layer_ids.to_vec());
        }
        Self {
            alphas: vec![0.01, 1.0, 100.0],
            fills: vec![5, 50, 500],
            layer_sets,
            base: CoverageConfig {
                correct_only: true,
                ..CoverageConfig::default()
            },
        }
    }

    pub fn settings(&self) -> Vec<Vec<LayerSettings>> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            for &fill in &self.fills {
                for set in &self.layer_sets {
                    let cov = CoverageConfig {
                        fill_threshold: fill,
                        ..self.base.clone()
                    };
                    out.push(
                        set.iter()
                            .map(|id| LayerSettings::new(id.clone(), alpha, cov.clone()))
                            .collect(),
                    );
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeCandidate {
    pub alpha: f64,
    pub fill: u64,
    pub layers: Vec<String>,
    /// Rank correlation of NAC-ME with InD validation accuracy (selection
    /// key); `None` when undefined.
    pub val_rc: Option<f64>,
    pub ood_rc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeSelection {
    pub candidates: Vec<MeCandidate>,
    pub selected: usize,
    pub ranking: ModelRanking,
}

/// Picks NAC-ME settings by rank agreement with InD validation accuracy
/// across checkpoints. OOD accuracy is only reported, never consulted.
pub fn select_model_criterion(set: &CheckpointSet, grid: &MeGrid) -> Result<MeSelection> {
    let settings = grid.settings();
    if settings.is_empty() {
        return Err(NacError::InvalidArgument(
            "NAC-ME grid has an empty axis".into(),
        ));
    }
    let mut candidates = Vec::with_capacity(settings.len());
    let mut rankings = Vec::with_capacity(settings.len());
    for s in &settings {
        let ranking = set.rank(s)?;
        let val_rc = spearman_rc(&ranking.nac_me.criterion_values, &set.val_acc).ok();
        candidates.push(MeCandidate {
            alpha: s[0].alpha,
            fill: s[0].coverage.fill_threshold,
            layers: s.iter().map(|l| l.layer_id.clone()).collect(),
            val_rc,
            ood_rc: ranking.nac_me.rc,
        });
        rankings.push(ranking);
    }
    let key = |c: &MeCandidate| c.val_rc.unwrap_or(f64::NEG_INFINITY);
    let mut selected = 0;
    for (i, c) in candidates.iter().enumerate() {
        if key(c) > key(&candidates[selected]) {
            selected = i;
        }
    }
    Ok(MeSelection {
        ranking: rankings.swap_remove(selected),
        candidates,
        selected,
    })
}

pub fn me_candidates_csv(sel: &MeSelection) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
    let mut out = String::from("alpha,fill,layers,val_rc,ood_rc,selected\n");
    for (i, c) in sel.candidates.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.alpha,
            c.fill,
            c.layers.join("+"),
            fmt(c.val_rc),
            fmt(c.ood_rc),
            u8::from(i == sel.selected)
        );
    }
    out
}

pub fn ranking_csv(r: &ModelRanking) -> String {
    let mut out = String::from("step,nac_me,val_acc,ood_acc\n");
    for c in &r.checkpoints {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            c.step, c.nac_me, c.val_acc, c.ood_acc
        );
    }
    out
}

pub fn ranking_summary_csv(r: &ModelRanking) -> String {
    let mut out = String::from("criterion,spearman_rc,best_step,best_ood_acc\n");
    for (name, eval) in [("nac_me", &r.nac_me), ("val_acc", &r.val_acc)] {
        let rc = eval
            .rc
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            out,
            "{name},{rc},{},{:.6}",
            r.checkpoints[eval.best_index].step, eval.best_acc
        );
    }
    out
}

/// Hyperparameter grid. Every combination is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub bins: Vec<usize>,
    pub fills: Vec<u64>,
    /// Candidate layer sets (each a list of layer ids).
    pub layer_sets: Vec<Vec<String>>,
    /// Candidate per-layer weights; empty means weight 1 only.
    pub weights: Vec<f64>,
    pub base: CoverageConfig,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        let w = self.weight_assignments_per_set();
        self.alphas.len() * self.bins.len() * self.fills.len() * w.iter().sum::<usize>()
    }

    fn weight_assignments_per_set(&self) -> Vec<usize> {
        let choices = self.weights.len().max(1);
        self.layer_sets
            .iter()
            .map(|s| choices.pow(s.len() as u32))
            .collect()
    }
}

/// Grid weights searched by the weighted layer fusion.
pub const WEIGHT_CHOICES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub bins: usize,
    pub fill: u64,
    pub layers: Vec<String>,
    pub weights: Vec<f64>,
    pub val_auroc: f64,
    pub val_fpr95: f64,
    pub test_auroc: f64,
    pub test_fpr95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the best validation AUROC.
    pub selected: usize,
    /// Index of the cell with the best test AUROC (reported only).
    pub test_best: usize,
    pub test_worst: usize,
}

/// Data the selection stage may see: fitting and validation splits only.
pub struct SweepSplits<'a> {
    pub train: &'a SplitDumps,
    pub ind_val: &'a SplitDumps,
    pub ood_val: &'a SplitDumps,
}

/// One grid cell after validation: its fitted detector (shared between
/// weight assignments) and validation metrics.
pub struct ValidatedCell {
    pub alpha: f64,
    pub bins: usize,
    pub fill: u64,
    pub weights: Vec<f64>,
    pub detector: usize,
    pub val_auroc: f64,
    pub val_fpr95: f64,
}

/// Output of the selection stage.
pub struct SweepSelection {
    pub detectors: Vec<NacDetector>,
    pub cells: Vec<ValidatedCell>,
    pub selected: usize,
}

fn weighted_fuse(report: &ScoreReport, layers: &[String], weights: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; report.fused.len()];
    for (id, w) in layers.iter().zip(weights) {
        for (acc, v) in f.iter_mut().zip(&report.per_layer_scores[id]) {
            *acc += w * v;
        }
    }
    f
}

fn argmax_by(n: usize, key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    for i in 1..n {
        if key(i) > key(best) {
            best = i;
        }
    }
    best
}

/// Fits every grid cell and picks the one with the best validation AUROC.
/// Test data is not an input.
pub fn sweep_select(grid: &SweepGrid, splits: SweepSplits<'_>, tpr: f64) -> Result<SweepSelection> {
    if grid.alphas.is_empty()
        || grid.bins.is_empty()
        || grid.fills.is_empty()
        || grid.layer_sets.is_empty()
    {
        return Err(NacError::InvalidArgument(
            "sweep grid has an empty axis".into(),
        ));
    }
    let weight_choices: Vec<f64> = if grid.weights.is_empty() {
        vec![1.0]
    } else {
        grid.weights.clone()
    };
    let mut detectors = Vec::new();
    let mut cells = Vec::with_capacity(grid.cells());
    for &alpha in &grid.alphas {
        for &bins in &grid.bins {
            for &fill in &grid.fills {
                let cov = CoverageConfig {
                    bins,
                    fill_threshold: fill,
                    ..grid.base.clone()
                };
                for set in &grid.layer_sets {
                    let base: Vec<LayerSettings> = set
                        .iter()
                        .map(|id| LayerSettings::new(id.clone(), alpha, cov.clone()))
                        .collect();
                    let fitted = NacDetector::fit(splits.train, &base)?;
                    let iv = fitted.score(splits.ind_val, None)?;
                    let ov = fitted.score(splits.ood_val, None)?;
                    for weights in weight_product(&weight_choices, set.len()) {
                        let val = DetectionEval::new(
                            weighted_fuse(&iv, set, &weights),
                            weighted_fuse(&ov, set, &weights),
                            tpr,
                        )?;
                        cells.push(ValidatedCell {
                            alpha,
                            bins,
                            fill,
                            weights,
                            detector: detectors.len(),
                            val_auroc: val.auroc,
                            val_fpr95: val.fpr95,
                        });
                    }
                    detectors.push(fitted);
                }
            }
        }
    }
    let selected = argmax_by(cells.len(), |i| cells[i].val_auroc);
    Ok(SweepSelection {
        detectors,
        cells,
        selected,
    })
}

/// Scores every validated cell on the test split for reporting.
pub fn sweep_report(
    sel: &SweepSelection,
    test: (&SplitDumps, &SplitDumps),
    tpr: f64,
) -> Result<SweepResult> {
    let reports = sel
        .detectors
        .iter()
        .map(|d| Ok((d.score(test.0, None)?, d.score(test.1, None)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(sel.cells.len());
    for c in &sel.cells {
        let layers: Vec<String> = sel.detectors[c.detector]
            .layers
            .iter()
            .map(|(s, _)| s.layer_id.clone())
            .collect();
        let (it, ot) = &reports[c.detector];
        let eval = DetectionEval::new(
            weighted_fuse(it, &layers, &c.weights),
            weighted_fuse(ot, &layers, &c.weights),
            tpr,
        )?;
        cells.push(SweepCell {
            alpha: c.alpha,
            bins: c.bins,
            fill: c.fill,
            layers,
            weights: c.weights.clone(),
            val_auroc: c.val_auroc,
            val_fpr95: c.val_fpr95,
            test_auroc: eval.auroc,
            test_fpr95: eval.fpr95,
        });
    }
    let test_best = argmax_by(cells.len(), |i| cells[i].test_auroc);
    let test_worst = argmax_by(cells.len(), |i| -cells[i].test_auroc);
    if sel.selected != test_best {
        log::info!(
            "validation-selected cell {} differs from the test-best cell {test_best}",
            sel.selected
        );
    }
    Ok(SweepResult {
        cells,
        selected: sel.selected,
        test_best,
        test_worst,
    })
}

/// [`sweep_select`] followed by [`sweep_report`].
pub fn sweep(
    grid: &SweepGrid,
    splits: SweepSplits<'_>,
    test: (&SplitDumps, &SplitDumps),
    tpr: f64,
) -> Result<SweepResult> {
    let sel = sweep_select(grid, splits, tpr)?;
    sweep_report(&sel, test, tpr)
}

fn weight_product(choices: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |&w| {
                    let mut p = prefix.clone();
                    p.push(w);
                    p
                })
            })
            .collect();
    }
    out
}

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(
        "alpha,bins,fill,layers,weights,val_auroc,val_fpr95,test_auroc,test_fpr95,selected\n",
    );
    for (i, c) in result.cells.iter().enumerate() {
        let weights = c
            .weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join("+");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            c.alpha,
            c.bins,
            c.fill,
            c.layers.join("+"),
            weights,
            c.val_auroc,
            c.val_fpr95,
            c.test_auroc,
            c.test_fpr95,
            u8::from(i == result.selected)
        );
    }
    out
}
