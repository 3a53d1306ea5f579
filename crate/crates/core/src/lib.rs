//! Neuron activation coverage (NAC) for out-of-distribution detection and
//! model evaluation.
//!
//! The pipeline: a network layer's raw outputs `z` and the gradient of
//! `D_KL(u ‖ softmax(logits))` w.r.t. them are turned into activation states
//! ([`state`]); per-neuron histograms of those states on in-distribution
//! data define a coverage function ([`coverage`]); coverage then yields a
//! per-sample uncertainty score and a per-model robustness score, evaluated
//! with the usual detection and ranking metrics ([`metrics`]).

mod codec;
pub mod coverage;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod netlab;
pub mod plot;
pub mod state;

pub use codec::write_atomic;
pub use coverage::{
    fuse_layers, BinScale, CoverageConfig, CoverageHistogram, CoverageModel, Decision, ScoreReport,
    StateSource,
};
pub use data::{
    make_task, ActivationDump, LabeledSet, SyntheticTask, TaskKind, TaskSpec, UNLABELED,
};
pub use error::{NacError, Result};
pub use metrics::{
    auroc, energy_score, fpr_at_tpr, msp_score, spearman_rc, DetectionEval, RankEval,
};
pub use netlab::{
    kl_uniform, kl_uniform_flagged, train, train_with, Activation, Dense, DenseNet, EntropyMode,
    EntropyReg, LogitBundle, TrainConfig, TrainReport,
};
pub use state::{
    neuron_states, states_via_decomposition, Decomposition, NeuronStateMatrix, RawLayerBatch,
};
