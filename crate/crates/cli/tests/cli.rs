use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn nac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nac"))
        .args(args)
        .output()
        .expect("spawn nac")
}

fn ok(args: &[&str]) -> String {
    let out = nac(args);
    assert!(
        out.status.success(),
        "nac {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A short training run in `dir/run`.
fn trained(dir: &TempDir, extra: &[&str]) -> PathBuf {
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--steps",
        "60",
        "--checkpoint-every",
        "20",
        "--out",
        p(&run),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    run
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_creates_missing_output_dirs() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("a/b/run");
    let stdout = ok(&[
        "train",
        "--steps",
        "30",
        "--checkpoint-every",
        "10",
        "--out",
        p(&run),
    ]);
    assert!(stdout.contains("InD test accuracy"));
    for f in [
        "run.json",
        "model.nacw",
        "loss.csv",
        "manifest.json",
        "checkpoints/step_000030.nacw",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_dir(run.join("checkpoints")).unwrap().count(), 4);
}

#[test]
fn non_positive_learning_rate_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    for lr in ["0", "-0.1"] {
        let out = nac(&["train", "--lr", lr, "--out", p(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "lr {lr}");
    }
    assert!(!dir.path().join("model.nacw").exists());
}

#[test]
fn fit_and_detect_from_dumps_only() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let dumps = dir.path().join("dumps");
    ok(&["export", "--run", p(&run), "--out", p(&dumps)]);
    // the run directory is not needed once dumps exist
    fs::remove_dir_all(&run).unwrap();

    let models = dir.path().join("models");
    ok(&[
        "fit-nac",
        "--train-dumps",
        p(&dumps.join("train")),
        "--out",
        p(&models),
    ]);
    assert!(models.join("layer0.nacm").is_file() && models.join("layer1.nacm").is_file());

    let eval = dir.path().join("eval");
    ok(&[
        "eval-detect",
        "--models",
        p(&models),
        "--ind",
        p(&dumps.join("test")),
        "--ood",
        p(&dumps.join("ood-test")),
        "--out",
        p(&eval),
    ]);
    let rows = csv_rows(&eval.join("detection.csv"));
    let methods: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["nac-ue", "nac-ue", "msp", "energy"]);
}

#[test]
fn empty_ood_set_is_rejected() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let dumps = dir.path().join("dumps");
    ok(&[
        "export",
        "--run",
        p(&run),
        "--split",
        "test",
        "--out",
        p(&dumps),
    ]);
    let models = dir.path().join("models");
    ok(&["fit-nac", "--run", p(&run), "--out", p(&models)]);

    // a well-formed NACT file with zero rows
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    for layer in ["layer0", "layer1"] {
        let src = fs::read(dumps.join("test").join(format!("{layer}.nact"))).unwrap();
        let header_len = 4 + 4 + 2 + layer.len() + 4;
        let mut bytes = src[..header_len].to_vec();
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&src[header_len + 8..header_len + 12]);
        fs::write(empty.join(format!("{layer}.nact")), bytes).unwrap();
    }
    let out = nac(&[
        "eval-detect",
        "--models",
        p(&models),
        "--ind",
        p(&dumps.join("test")),
        "--ood",
        p(&empty),
        "--out",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("OOD set is empty"));
}

#[test]
fn single_checkpoint_reports_na_correlation() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--task", "shift", "--steps", "0", "--out", p(&run)]);
    let me = dir.path().join("me");
    ok(&[
        "eval-me",
        "--run",
        p(&run),
        "--alpha",
        "1",
        "--fill",
        "5",
        "--out",
        p(&me),
    ]);
    let rows = csv_rows(&me.join("summary.csv"));
    assert_eq!(
        rows[0],
        ["criterion", "spearman_rc", "best_step", "best_ood_acc"]
    );
    for row in &rows[1..] {
        assert_eq!(row[1], "NA");
        assert_eq!(row[2], "0");
        let acc: f64 = row[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn eval_me_ranks_every_checkpoint() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &["--task", "shift"]);
    let me = dir.path().join("me");
    ok(&["eval-me", "--run", p(&run), "--out", p(&me)]);
    assert_eq!(csv_rows(&me.join("checkpoints.csv")).len(), 1 + 4);
    let candidates = csv_rows(&me.join("candidates.csv"));
    assert_eq!(candidates.len(), 1 + 27);
    assert_eq!(candidates[1..].iter().filter(|r| r[5] == "1").count(), 1);
}

#[test]
fn plots_are_valid_svg() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let out = dir.path().join("plots");
    ok(&["plot", "--run", p(&run), "--neuron", "3", "--out", p(&out)]);
    let mut svgs = 0;
    for entry in fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "svg") {
            let text = fs::read_to_string(&path).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            assert!(doc.descendants().any(|n| n.has_tag_name("rect")));
            svgs += 1;
        }
    }
    // three state forms plus the fused score
    assert_eq!(svgs, 4);
    assert!(out.join("layer1_n3_z_times_grad.csv").is_file());
}

#[test]
fn out_of_range_neuron_is_an_error() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let out = nac(&[
        "plot",
        "--run",
        p(&run),
        "--neuron",
        "999",
        "--out",
        p(&dir.path().join("plots")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("neuron"));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let mut detections = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&[
            "train",
            "--steps",
            "40",
            "--checkpoint-every",
            "20",
            "--seed",
            "7",
            "--out",
            p(&run),
        ]);
        let eval = run.join("eval");
        let models = run.join("models");
        ok(&[
            "fit-nac",
            "--run",
            p(&run),
            "--subset-frac",
            "0.05",
            "--seed",
            "3",
            "--out",
            p(&models),
        ]);
        ok(&[
            "eval-detect",
            "--models",
            p(&models),
            "--run",
            p(&run),
            "--out",
            p(&eval),
        ]);
        detections.push((
            fs::read(run.join("model.nacw")).unwrap(),
            fs::read(eval.join("detection.csv")).unwrap(),
            fs::read(eval.join("scores.csv")).unwrap(),
        ));
    }
    assert!(detections[0] == detections[1]);
}

#[test]
fn replay_reproduces_outputs() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let models = dir.path().join("models");
    ok(&[
        "fit-nac",
        "--run",
        p(&run),
        "--bins",
        "20",
        "--alpha",
        "10",
        "--out",
        p(&models),
    ]);
    let eval = dir.path().join("eval");
    ok(&[
        "eval-detect",
        "--models",
        p(&models),
        "--run",
        p(&run),
        "--tpr",
        "0.9",
        "--out",
        p(&eval),
    ]);

    let again = dir.path().join("again");
    ok(&[
        "replay",
        "--manifest",
        p(&eval.join("manifest.json")),
        "--out",
        p(&again),
    ]);
    for f in ["detection.csv", "detection.txt", "scores.csv"] {
        assert_eq!(
            fs::read(eval.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval-detect");
    assert!(manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "detection.csv"));
}

#[test]
fn sweep_writes_every_cell() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--run",
        p(&run),
        "--alpha",
        "1",
        "--alpha",
        "100",
        "--bins",
        "10,50",
        "--fill",
        "1,50,500",
        "--weights",
        "0.5,1.0",
        "--out",
        p(&out),
    ]);
    let rows = csv_rows(&out.join("sweep.csv"));
    // 2 α × 2 M × 3 O* × 2² weight assignments over two layers
    assert_eq!(rows.len(), 1 + 48);
    let sel = rows[0].iter().position(|h| h == "selected").unwrap();
    assert_eq!(rows[1..].iter().filter(|r| r[sel] == "1").count(), 1);
    let selected: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("selected.json")).unwrap()).unwrap();
    assert!(selected.is_object());
}

#[test]
fn unknown_layer_lists_alternatives() {
    let dir = TempDir::new().unwrap();
    let run = trained(&dir, &[]);
    let out = nac(&[
        "fit-nac",
        "--run",
        p(&run),
        "--layers",
        "layer7",
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layer7") && err.contains("layer0"), "{err}");
}
