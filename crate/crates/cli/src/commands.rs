use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use nac_core::experiment::{
    default_task, detection_csv, detection_table, evaluate_detection, fit_layer, me_candidates_csv,
    ranking_csv, ranking_summary_csv, select_model_criterion, subset_rows, sweep, sweep_csv,
    CheckpointSet, LayerSettings, MeGrid, NacDetector, Recipe, SplitDumps, SweepGrid, SweepSplits,
};
use nac_core::plot::{score_histogram, state_histograms};
use nac_core::state::{layer_id_for_tap, tap_for_layer_id};
use nac_core::{
    make_task, train_with, CoverageConfig, CoverageModel, Decision, EntropyMode, EntropyReg,
    StateSource, TaskKind,
};
use serde_json::json;

use crate::args::{
    CoverageArgs, DetectArgs, ExportArgs, FitArgs, MeArgs, PlotArgs, SplitArg, SweepArgs, TrainArgs,
};
use crate::io::{
    checkpoint_path, display, read_dumps, read_models, Output, RunDir, RunInfo, MODEL_FILE,
    RUN_FILE,
};

/// Sorts layer ids by tap index, unknown names last.
fn layer_order(ids: &mut [String]) {
    ids.sort_by_key(|id| (tap_for_layer_id(id).unwrap_or(usize::MAX), id.clone()));
}

fn resolve_layers(requested: &[String], mut available: Vec<String>) -> Result<Vec<String>> {
    layer_order(&mut available);
    if requested.is_empty() {
        return Ok(available);
    }
    for id in requested {
        if !available.contains(id) {
            bail!("unknown layer {id:?}; available: {}", available.join(", "));
        }
    }
    Ok(requested.to_vec())
}

/// Expands a per-layer option: empty means `default`, one value applies to
/// every layer.
fn per_layer<T: Copy>(flag: &str, values: &[T], layers: usize, default: T) -> Result<Vec<T>> {
    match values.len() {
        0 => Ok(vec![default; layers]),
        1 => Ok(vec![values[0]; layers]),
        n if n == layers => Ok(values.to_vec()),
        n => bail!("--{flag} given {n} values for {layers} layers"),
    }
}

/// Each occurrence of a repeatable `--layers` flag is one comma-separated set.
fn layer_sets(values: &[String]) -> Vec<Vec<String>> {
    values
        .iter()
        .map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .filter(|s: &Vec<String>| !s.is_empty())
        .collect()
}

fn coverage_config(c: &CoverageArgs, correct_only: bool) -> CoverageConfig {
    CoverageConfig {
        bins: c.bins,
        fill_threshold: c.fill,
        bin_scale: c.bin_scale.into(),
        log_epsilon: c.log_epsilon,
        correct_only,
    }
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let kind: TaskKind = a.task.into();
    let spec = default_task(kind, a.seed);
    let mut recipe = Recipe::for_task(kind, a.seed);
    if let Some(lr) = a.lr {
        recipe.train.learning_rate = lr;
    }
    if let Some(steps) = a.steps {
        recipe.train.steps = steps;
    }
    if let Some(b) = a.batch_size {
        recipe.train.batch_size = b;
    }
    if let Some(h) = &a.hidden {
        if h.is_empty() {
            bail!("--hidden needs at least one width");
        }
        recipe.hidden = h.clone();
    }
    if a.checkpoint_every == 0 {
        bail!("--checkpoint-every must be positive");
    }
    recipe.checkpoint_every = a.checkpoint_every;
    recipe.train.entropy = EntropyReg {
        mode: a.entropy.into(),
        coefficient: a.entropy_coef,
        ..EntropyReg::default()
    };

    let task = make_task(&spec)?;
    let mut net = recipe.init_net(&task)?;
    let coverage = match recipe.train.entropy.mode {
        EntropyMode::None => None,
        _ => {
            let deepest = layer_id_for_tap(*net.taps().last().expect("at least one hidden layer"));
            let layer = a.entropy_layer.clone().unwrap_or(deepest);
            let tap = tap_for_layer_id(&layer)
                .filter(|t| net.taps().contains(t))
                .with_context(|| format!("--entropy-layer {layer:?} is not a hidden layer"))?;
            let width = net.layer_width(tap).expect("tap exists");
            Some(CoverageModel::new(
                layer,
                width,
                CoverageConfig::default(),
                StateSource::RawSquashed {
                    alpha: a.entropy_alpha,
                },
            )?)
        }
    };

    let mut out = Output::create(&a.out)?;
    let every = recipe.checkpoint_every;
    let steps = recipe.train.steps;
    let mut saved = Vec::new();
    let mut save_err = None;
    let report = train_with(
        &mut net,
        &task.ind_train,
        &recipe.train,
        coverage.as_ref(),
        |step, n| {
            if save_err.is_some() || !(step % every == 0 || step == steps) {
                return;
            }
            match n.save(&checkpoint_path(&a.out, step)) {
                Ok(()) => saved.push(step),
                Err(e) => save_err = Some(e),
            }
        },
    )?;
    if let Some(e) = save_err {
        return Err(e).context("saving checkpoint");
    }
    for &s in &saved {
        let p = checkpoint_path(std::path::Path::new(""), s);
        out.record(&p.display().to_string());
    }
    net.save(&out.path(MODEL_FILE))?;
    out.record(MODEL_FILE);

    let mut loss = String::from("step,loss");
    let with_entropy = !report.entropy_trace.is_empty();
    if with_entropy {
        loss.push_str(",nac_entropy");
    }
    loss.push('\n');
    for (i, l) in report.loss_trace.iter().enumerate() {
        let _ = write!(loss, "{},{l:.6}", i + 1);
        if with_entropy {
            let _ = write!(loss, ",{:.6}", report.entropy_trace[i]);
        }
        loss.push('\n');
    }
    out.write("loss.csv", loss.as_bytes())?;

    let info = RunInfo {
        task: spec.clone(),
        recipe: recipe.clone(),
        checkpoints: saved,
    };
    out.write_json(RUN_FILE, &info)?;
    let test_acc = net.accuracy(&task.ind_test)?;
    let ood_acc = net.accuracy(&task.ood_test)?;
    println!(
        "trained {} steps: final loss {:.4}, InD test accuracy {:.4}, OOD test accuracy {:.4}",
        steps,
        report.loss_trace.last().copied().unwrap_or(f64::NAN),
        test_acc,
        ood_acc
    );
    out.finish(
        "train",
        argv,
        Some(a.seed),
        json!({ "task": spec, "recipe": recipe }),
        Vec::new(),
    )
}

pub fn export(a: &ExportArgs, argv: &[String]) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let task = run.task()?;
    let net = run.model()?;
    let splits = if a.split.is_empty() {
        vec![
            SplitArg::Train,
            SplitArg::Val,
            SplitArg::Test,
            SplitArg::OodVal,
            SplitArg::OodTest,
        ]
    } else {
        a.split.clone()
    };
    let mut out = Output::create(&a.out)?;
    for split in &splits {
        let set = match split {
            SplitArg::Train => &task.ind_train,
            SplitArg::Val => &task.ind_val,
            SplitArg::Test => &task.ind_test,
            SplitArg::OodVal => &task.ood_val,
            SplitArg::OodTest => &task.ood_test,
        };
        let dumps = SplitDumps::from_net(&net, set)?;
        for d in &dumps.dumps {
            out.write(
                &format!("{}/{}.nact", split.name(), d.layer_id),
                &d.to_bytes()?,
            )?;
        }
        println!(
            "{}: {} rows, {} layers",
            split.name(),
            dumps.rows(),
            dumps.dumps.len()
        );
    }
    let names: Vec<&str> = splits.iter().map(|s| s.name()).collect();
    out.finish(
        "export",
        argv,
        Some(run.info.task.seed),
        json!({ "splits": names }),
        vec![display(&a.run)],
    )
}

pub fn fit_nac(a: &FitArgs, argv: &[String]) -> Result<()> {
    let (train, input) = match (&a.run, &a.train_dumps) {
        (Some(run), _) => {
            let r = RunDir::open(run)?;
            let task = r.task()?;
            (
                SplitDumps::from_net(&r.model()?, &task.ind_train)?,
                display(run),
            )
        }
        (None, Some(dir)) => (read_dumps(dir)?, display(dir)),
        (None, None) => bail!("either --run or --train-dumps is required"),
    };
    let layers = resolve_layers(&a.coverage.layers, train.layer_ids())?;
    let alphas = per_layer("alpha", &a.coverage.alpha, layers.len(), 100.0)?;
    let cov = coverage_config(&a.coverage, a.correct_only);
    cov.validate()?;
    let rows = subset_rows(train.rows(), a.subset_frac, a.seed)?;
    let train = if rows.len() < train.rows() {
        train.select(&rows)
    } else {
        train
    };
    let settings: Vec<LayerSettings> = layers
        .iter()
        .zip(&alphas)
        .map(|(id, &alpha)| LayerSettings::new(id.clone(), alpha, cov.clone()))
        .collect();

    let mut out = Output::create(&a.out)?;
    let mut summary = String::from("layer,neurons,samples,bins,fill,alpha,bin_scale,nac_me\n");
    for s in &settings {
        let model = fit_layer(train.layer(&s.layer_id)?, s)?;
        out.write(&format!("{}.nacm", s.layer_id), &model.to_bytes()?)?;
        let nac_me = model
            .nac_me()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|_| "NA".into());
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{:?},{}",
            s.layer_id,
            model.neurons(),
            model.total(),
            cov.bins,
            cov.fill_threshold,
            s.alpha,
            cov.bin_scale,
            nac_me
        );
    }
    out.write("fit_summary.csv", summary.as_bytes())?;
    print!("{summary}");
    out.finish(
        "fit-nac",
        argv,
        Some(a.seed),
        json!({ "layers": settings, "subset_frac": a.subset_frac, "subset_rows": train.rows() }),
        vec![input],
    )
}

pub fn eval_detect(a: &DetectArgs, argv: &[String]) -> Result<()> {
    let mut models = read_models(&a.models)?;
    let layers = resolve_layers(&a.layers, models.keys().cloned().collect())?;
    let weights = per_layer("weights", &a.weights, layers.len(), 1.0)?;
    let weight_map: BTreeMap<String, f64> = layers.iter().cloned().zip(weights).collect();
    let chosen: Vec<CoverageModel> = layers
        .iter()
        .map(|id| models.remove(id).expect("resolved layer"))
        .collect();
    let detector = NacDetector::from_models(chosen, &weight_map)?;

    let (ind, ood, inputs) = match (&a.run, &a.ind, &a.ood) {
        (Some(run), _, _) => {
            let r = RunDir::open(run)?;
            let task = r.task()?;
            let net = r.model()?;
            (
                SplitDumps::from_net(&net, &task.ind_test)?,
                SplitDumps::from_net(&net, &task.ood_test)?,
                vec![display(run)],
            )
        }
        (None, Some(i), Some(o)) => (read_dumps(i)?, read_dumps(o)?, vec![display(i), display(o)]),
        _ => bail!("either --run or both --ind and --ood are required"),
    };
    if ood.rows() == 0 {
        bail!("the OOD set is empty");
    }
    if ind.rows() == 0 {
        bail!("the in-distribution set is empty");
    }
    let rows = evaluate_detection(&detector, &ind, &ood, a.tpr)?;
    let mut out = Output::create(&a.out)?;
    out.write("detection.csv", detection_csv(&rows).as_bytes())?;
    let table = detection_table(&rows);
    out.write("detection.txt", table.as_bytes())?;
    print!("{table}");

    let full = rows
        .iter()
        .rfind(|r| r.method == "nac-ue")
        .expect("at least one layer");
    let mut scores = String::from("set,row,fused,decision\n");
    for (name, split) in [("ind", &ind), ("ood", &ood)] {
        let report = detector.score(split, Some(full.threshold))?;
        let decisions = report.decisions.expect("threshold given");
        for (i, (s, d)) in report.fused.iter().zip(decisions).enumerate() {
            let d = match d {
                Decision::InDistribution => "ind",
                Decision::OutOfDistribution => "ood",
            };
            let _ = writeln!(scores, "{name},{i},{s:.6},{d}");
        }
    }
    out.write("scores.csv", scores.as_bytes())?;
    let settings: Vec<&LayerSettings> = detector.layers.iter().map(|(s, _)| s).collect();
    out.finish(
        "eval-detect",
        argv,
        None,
        json!({ "layers": settings, "tpr": a.tpr, "threshold": full.threshold }),
        std::iter::once(display(&a.models)).chain(inputs).collect(),
    )
}

pub fn eval_me(a: &MeArgs, argv: &[String]) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let task = run.task()?;
    let checkpoints = run.checkpoints()?;
    if checkpoints.len() < 2 {
        log::warn!(
            "only {} checkpoint(s): rank correlation needs at least 2 and is reported as NA",
            checkpoints.len()
        );
    }
    let taps: Vec<String> = checkpoints[0]
        .1
        .taps()
        .iter()
        .map(|&t| layer_id_for_tap(t))
        .collect();
    let mut grid = MeGrid::default_for(&taps);
    if !a.alpha.is_empty() {
        grid.alphas = a.alpha.clone();
    }
    if !a.fill.is_empty() {
        grid.fills = a.fill.clone();
    }
    let sets = layer_sets(&a.layers);
    if !sets.is_empty() {
        for set in &sets {
            resolve_layers(set, taps.clone())?;
        }
        grid.layer_sets = sets;
    }
    grid.base.bins = a.bins;
    grid.base.bin_scale = a.bin_scale.into();
    grid.base.correct_only = a.correct_only;
    grid.base.validate()?;

    let set = CheckpointSet::collect(&checkpoints, &task)?;
    let sel = select_model_criterion(&set, &grid)?;
    let mut out = Output::create(&a.out)?;
    out.write("candidates.csv", me_candidates_csv(&sel).as_bytes())?;
    out.write("checkpoints.csv", ranking_csv(&sel.ranking).as_bytes())?;
    let summary = ranking_summary_csv(&sel.ranking);
    out.write("summary.csv", summary.as_bytes())?;
    let c = &sel.candidates[sel.selected];
    println!(
        "selected alpha={} fill={} layers={} on validation agreement",
        c.alpha,
        c.fill,
        c.layers.join("+")
    );
    print!("{summary}");
    if sel.ranking.nac_me.best_index != sel.ranking.val_acc.best_index {
        log::info!("NAC-ME and validation accuracy pick different checkpoints");
    }
    out.finish(
        "eval-me",
        argv,
        Some(run.info.task.seed),
        json!({ "grid": grid, "selected": c }),
        vec![display(&a.run)],
    )
}

pub fn run_sweep(a: &SweepArgs, argv: &[String]) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let (_, dumps) = run.dumps()?;
    let taps = dumps.train.layer_ids();
    let mut sets = layer_sets(&a.layers);
    if sets.is_empty() {
        sets.push(resolve_layers(&[], taps.clone())?);
    }
    for s in &sets {
        resolve_layers(s, taps.clone())?;
    }
    let or = |v: &[f64], d: &[f64]| if v.is_empty() { d.to_vec() } else { v.to_vec() };
    let grid = SweepGrid {
        alphas: or(&a.alpha, &[1.0, 100.0, 1000.0]),
        bins: if a.bins.is_empty() {
            vec![10, 50, 500]
        } else {
            a.bins.clone()
        },
        fills: if a.fill.is_empty() {
            vec![1, 50, 500]
        } else {
            a.fill.clone()
        },
        layer_sets: sets,
        weights: a.weights.clone(),
        base: CoverageConfig {
            bin_scale: a.bin_scale.into(),
            ..CoverageConfig::default()
        },
    };
    let splits = SweepSplits {
        train: &dumps.train,
        ind_val: &dumps.val,
        ood_val: &dumps.ood_val,
    };
    let result = sweep(&grid, splits, (&dumps.test, &dumps.ood_test), a.tpr)?;
    let mut out = Output::create(&a.out)?;
    out.write("sweep.csv", sweep_csv(&result).as_bytes())?;
    let sel = &result.cells[result.selected];
    out.write_json("selected.json", sel)?;
    println!(
        "{} cells; selected alpha={} bins={} fill={} layers={}: val AUROC {:.4}, test AUROC {:.4}, test FPR95 {:.4}",
        result.cells.len(),
        sel.alpha,
        sel.bins,
        sel.fill,
        sel.layers.join("+"),
        sel.val_auroc,
        sel.test_auroc,
        sel.test_fpr95
    );
    if result.selected != result.test_best {
        println!(
            "note: the best test cell ({:.4}) was not selected; selection uses validation data only",
            result.cells[result.test_best].test_auroc
        );
    }
    out.finish(
        "sweep",
        argv,
        Some(run.info.task.seed),
        json!({ "grid": grid, "tpr": a.tpr }),
        vec![display(&a.run)],
    )
}

pub fn plot(a: &PlotArgs, argv: &[String]) -> Result<()> {
    let (ind, ood, train, inputs) = match (&a.run, &a.ind, &a.ood) {
        (Some(run), _, _) => {
            let r = RunDir::open(run)?;
            let (_, d) = r.dumps()?;
            (d.test, d.ood_test, Some(d.train), vec![display(run)])
        }
        (None, Some(i), Some(o)) => (
            read_dumps(i)?,
            read_dumps(o)?,
            None,
            vec![display(i), display(o)],
        ),
        _ => bail!("either --run or both --ind and --ood are required"),
    };
    let mut ids = ind.layer_ids();
    layer_order(&mut ids);
    let layer = match &a.layers {
        Some(l) => resolve_layers(std::slice::from_ref(l), ids)?.remove(0),
        None => ids.last().cloned().expect("at least one layer"),
    };
    let hists = state_histograms(
        ind.layer(&layer)?,
        ood.layer(&layer)?,
        a.neuron,
        a.alpha,
        a.bins,
    )?;
    let mut out = Output::create(&a.out)?;
    for (form, h) in &hists {
        let stem = format!("{layer}_n{}_{}", a.neuron, form.name());
        out.write(&format!("{stem}.csv"), h.to_csv().as_bytes())?;
        out.write(&format!("{stem}.svg"), h.to_svg().as_bytes())?;
    }
    let detector = match (&a.models, &train) {
        (Some(dir), _) => {
            let models: Vec<CoverageModel> = read_models(dir)?.into_values().collect();
            Some(NacDetector::from_models(models, &BTreeMap::new())?)
        }
        (None, Some(train)) => {
            let settings: Vec<LayerSettings> = resolve_layers(&[], train.layer_ids())?
                .into_iter()
                .map(|id| LayerSettings::new(id, 100.0, CoverageConfig::default()))
                .collect();
            Some(NacDetector::fit(train, &settings)?)
        }
        (None, None) => {
            log::info!("no coverage models given; skipping the fused-score plot");
            None
        }
    };
    if let Some(det) = detector {
        let h = score_histogram(&det.fused(&ind)?, &det.fused(&ood)?, a.bins)?;
        out.write("scores.csv", h.to_csv().as_bytes())?;
        out.write("scores.svg", h.to_svg().as_bytes())?;
    }
    out.finish(
        "plot",
        argv,
        None,
        json!({ "layer": layer, "neuron": a.neuron, "alpha": a.alpha, "bins": a.bins }),
        inputs,
    )
}
