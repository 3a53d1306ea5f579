use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nac_core::{BinScale, EntropyMode, TaskKind};

#[derive(Parser, Debug)]
#[command(
    name = "nac",
    version,
    about = "Neuron activation coverage experiments"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a toy classifier on a synthetic task, saving periodic checkpoints.
    Train(TrainArgs),
    /// Write per-layer activation dumps (NACT) of a trained run.
    Export(ExportArgs),
    /// Fit per-layer coverage models (NACM) on in-distribution training data.
    FitNac(FitArgs),
    /// Compare NAC-UE with MSP and energy on InD vs OOD data.
    EvalDetect(DetectArgs),
    /// Rank training checkpoints by NAC-ME and validation accuracy.
    EvalMe(MeArgs),
    /// Grid search over coverage hyperparameters with validation selection.
    Sweep(SweepArgs),
    /// Emit InD/OOD state and score histograms as CSV and SVG.
    Plot(PlotArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Heldout,
    Shift,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Heldout => TaskKind::HeldoutClass,
            TaskArg::Shift => TaskKind::CovariateShift,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Log,
    Uniform,
}

impl From<ScaleArg> for BinScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Log => BinScale::Log,
            ScaleArg::Uniform => BinScale::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EntropyArg {
    None,
    Maximize,
    Minimize,
}

impl From<EntropyArg> for EntropyMode {
    fn from(e: EntropyArg) -> Self {
        match e {
            EntropyArg::None => EntropyMode::None,
            EntropyArg::Maximize => EntropyMode::Maximize,
            EntropyArg::Minimize => EntropyMode::Minimize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    OodVal,
    OodTest,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::OodVal => "ood-val",
            SplitArg::OodTest => "ood-test",
        }
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {s}"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a non-negative number, got {s}"))
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Heldout)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Learning rate (task default when omitted).
    #[arg(long, allow_negative_numbers = true, value_parser = positive_f64)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden widths, e.g. 32,32.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, default_value_t = 300)]
    pub checkpoint_every: usize,
    /// Optional NAC-entropy regularisation of one hidden layer.
    #[arg(long, value_enum, default_value_t = EntropyArg::None)]
    pub entropy: EntropyArg,
    #[arg(long, default_value_t = 0.1, value_parser = non_negative_f64)]
    pub entropy_coef: f64,
    /// Layer to regularise (deepest tap when omitted).
    #[arg(long)]
    pub entropy_layer: Option<String>,
    /// Steepness of `σ(α·z)` for the regulariser.
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub entropy_alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Directory written by `nac train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Splits to export (all when omitted).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub split: Vec<SplitArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct CoverageArgs {
    /// Layer ids, comma separated (all tapped layers when omitted).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// Sigmoid steepness; repeat once per layer or give one value for all.
    #[arg(long, value_parser = positive_f64)]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Fill threshold O*.
    #[arg(long, default_value_t = 50)]
    pub fill: u64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Uniform)]
    pub bin_scale: ScaleArg,
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    pub log_epsilon: f64,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(
        long,
        conflicts_with = "train_dumps",
        required_unless_present = "train_dumps"
    )]
    pub run: Option<PathBuf>,
    /// Directory of NACT dumps of InD training data, one per layer.
    #[arg(long)]
    pub train_dumps: Option<PathBuf>,
    #[command(flatten)]
    pub coverage: CoverageArgs,
    /// Fraction of training rows to fit on.
    #[arg(long, default_value_t = 1.0, value_parser = fraction)]
    pub subset_frac: f64,
    /// Fit only on correctly classified samples.
    #[arg(long)]
    pub correct_only: bool,
    /// Seed for subset selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Directory of NACM files written by `nac fit-nac`.
    #[arg(long)]
    pub models: PathBuf,
    /// Evaluate on a run's InD test and OOD test splits.
    #[arg(long, conflicts_with_all = ["ind", "ood"], required_unless_present_all = ["ind", "ood"])]
    pub run: Option<PathBuf>,
    /// Directory of NACT dumps of InD evaluation data.
    #[arg(long, requires = "ood")]
    pub ind: Option<PathBuf>,
    #[arg(long, requires = "ind")]
    pub ood: Option<PathBuf>,
    /// Restrict to these layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// Fusion weights, one per layer in layer order (default 1).
    #[arg(long, value_delimiter = ',', value_parser = non_negative_f64)]
    pub weights: Vec<f64>,
    #[arg(long, default_value_t = 0.95, value_parser = fraction)]
    pub tpr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Candidate layer sets; repeat the flag, each value comma separated.
    #[arg(long)]
    pub layers: Vec<String>,
    /// Candidate α values (repeatable).
    #[arg(long, value_parser = positive_f64)]
    pub alpha: Vec<f64>,
    /// Candidate fill thresholds O*.
    #[arg(long, value_delimiter = ',')]
    pub fill: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, value_enum, default_value_t = ScaleArg::Uniform)]
    pub bin_scale: ScaleArg,
    /// Fit on correctly classified samples only.
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub correct_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Grid values of α (repeatable).
    #[arg(long, value_parser = positive_f64)]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub bins: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub fill: Vec<u64>,
    /// Candidate layer sets; repeat the flag, each value comma separated.
    #[arg(long)]
    pub layers: Vec<String>,
    /// Candidate per-layer fusion weights, e.g. 0.2,0.4,0.6,0.8,1.0.
    #[arg(long, value_delimiter = ',', value_parser = non_negative_f64)]
    pub weights: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Uniform)]
    pub bin_scale: ScaleArg,
    #[arg(long, default_value_t = 0.95, value_parser = fraction)]
    pub tpr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long, conflicts_with_all = ["ind", "ood"], required_unless_present_all = ["ind", "ood"])]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "ood")]
    pub ind: Option<PathBuf>,
    #[arg(long, requires = "ind")]
    pub ood: Option<PathBuf>,
    /// Coverage models for the fused-score plot. With `--run` and no
    /// models, defaults are fitted on the run's training split.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Layer whose neuron is plotted (deepest available when omitted).
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub neuron: usize,
    #[arg(long, default_value_t = 100.0, value_parser = positive_f64)]
    pub alpha: f64,
    /// Histogram bins.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
