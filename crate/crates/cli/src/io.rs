use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nac_core::experiment::{Recipe, SplitDumps, TaskDumps};
use nac_core::{
    make_task, write_atomic, ActivationDump, CoverageModel, DenseNet, SyntheticTask, TaskSpec,
};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.nacw";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "manifest.json";

/// What `nac train` records about a run; enough to regenerate its data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub task: TaskSpec,
    pub recipe: Recipe,
    /// Checkpoint steps, in order.
    pub checkpoints: Vec<usize>,
}

pub struct RunDir {
    pub path: PathBuf,
    pub info: RunInfo,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        let file = path.join(RUN_FILE);
        let text = fs::read_to_string(&file)
            .with_context(|| format!("{} is not a training run directory", path.display()))?;
        let info =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            info,
        })
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        Ok(make_task(&self.info.task)?)
    }

    pub fn model(&self) -> Result<DenseNet> {
        let p = self.path.join(MODEL_FILE);
        DenseNet::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        checkpoint_path(&self.path, step)
    }

    pub fn checkpoints(&self) -> Result<Vec<(usize, DenseNet)>> {
        self.info
            .checkpoints
            .iter()
            .map(|&s| {
                let p = self.checkpoint_path(s);
                Ok((
                    s,
                    DenseNet::load(&p).with_context(|| format!("loading {}", p.display()))?,
                ))
            })
            .collect()
    }

    pub fn dumps(&self) -> Result<(SyntheticTask, TaskDumps)> {
        let task = self.task()?;
        let dumps = TaskDumps::collect(&self.model()?, &task)?;
        Ok((task, dumps))
    }
}

pub fn checkpoint_path(run: &Path, step: usize) -> PathBuf {
    run.join(CHECKPOINT_DIR)
        .join(format!("step_{step:06}.nacw"))
}

fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every `*.nact` file in `dir` (or the single file `dir`).
pub fn read_dumps(path: &Path) -> Result<SplitDumps> {
    let files = if path.is_dir() {
        files_with_extension(path, "nact")?
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no .nact files in {}", path.display());
    }
    let dumps = files
        .iter()
        .map(|f| ActivationDump::read(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitDumps::new(dumps)?)
}

/// Reads every `*.nacm` file in `dir`, keyed by layer id.
pub fn read_models(dir: &Path) -> Result<BTreeMap<String, CoverageModel>> {
    let files = files_with_extension(dir, "nacm")?;
    if files.is_empty() {
        bail!("no .nacm files in {}", dir.display());
    }
    let mut out = BTreeMap::new();
    for f in files {
        let m = CoverageModel::load(&f).with_context(|| format!("reading {}", f.display()))?;
        out.insert(m.layer_id().to_string(), m);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// An output directory. Files are written atomically; the manifest lists
/// them and is written last.
pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file written by other means (e.g. `save`).
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn finish(
        mut self,
        command: &str,
        args: &[String],
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: Vec<String>,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}
