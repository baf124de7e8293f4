use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SYNTH: &str = "n_clusters = 2\nnodes_per_cluster = 3\nlength = 360\nseed = 4\n";

const MODEL: &str = "[model]\nc_t = 4\nc_g = 3\np_cluster = 0.34\nseed = 2\n\
[training]\nepochs = 1\nfine_tune_epochs = 1\nbatch_size = 16\nseed = 2\n";

fn ahstn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ahstn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ahstn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Synthesizes a dataset and writes a training config pointing at it.
fn workspace(extra: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.cfg");
    fs::write(&spec, SYNTH).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("[data]\nseries = data/series.csv\nedges = data/edges.csv\nlabels = data/labels.csv\n{MODEL}{extra}"),
    )
    .unwrap();
    (dir, cfg)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.cfg");
    fs::write(&spec, SYNTH).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", s(&spec), "--out", s(&a)]);
    ok(&["synth", "--config", s(&spec), "--out", s(&b)]);
    for f in ["series.csv", "edges.csv", "labels.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let series = read(a.join("series.csv"));
    assert_eq!(series.lines().count(), 361);
    assert_eq!(series.lines().next().unwrap().split(',').count(), 6);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.cfg");
    fs::write(&spec, "n_clusters = 2\nwobble = 3\n").unwrap();
    let out = ahstn(&["synth", "--config", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wobble"));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = ahstn(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn non_empty_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    fs::create_dir(&out_dir).unwrap();
    fs::write(out_dir.join("keep.txt"), "x").unwrap();
    let out = ahstn(&["synth", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.join("series.csv").exists());
}

#[test]
fn train_evaluate_predict_inspect() {
    let (dir, cfg) = workspace("");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--with-baselines"]);
    for f in ["model.ckpt", "history.csv", "report.csv", "assignment.csv", "manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = read(run.join("history.csv"));
    assert_eq!(history.lines().count(), 3);
    let report = csv_rows(&read(run.join("report.csv")));
    let models: Vec<&str> = report[1..].iter().map(|r| r[0].as_str()).collect();
    assert!(models.contains(&"ha") && models.contains(&"last-value"));
    let manifest = read(run.join("manifest.txt"));
    assert!(manifest.contains("block4"));
    let assignment = csv_rows(&read(run.join("assignment.csv")));
    assert_eq!(assignment.len(), 7);

    // Evaluating the checkpoint reproduces the test row written by train.
    let eval = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    ok(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&eval)]);
    let again = csv_rows(&read(eval.join("report.csv")));
    let trained = report.iter().find(|r| r[0] == "ahstn" && r[1] == "test").unwrap();
    assert_eq!(&again[1], trained);

    // Predict from the last input window of the series.
    let series = read(dir.path().join("data/series.csv"));
    let lines: Vec<&str> = series.lines().collect();
    let mut window = lines[0].to_string() + "\n";
    for l in &lines[lines.len() - 12..] {
        window.push_str(l);
        window.push('\n');
    }
    let input = dir.path().join("window.csv");
    fs::write(&input, &window).unwrap();
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&p1)]);
    ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&p2)]);
    let forecast = read(p1.join("forecast.csv"));
    assert_eq!(forecast, read(p2.join("forecast.csv")));
    let rows = csv_rows(&forecast);
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0].len(), 13);
    assert!(rows[1..].iter().flat_map(|r| &r[1..]).all(|v| v.parse::<f64>().unwrap().is_finite()));

    // A node with no observations gets flagged; the rest still forecast.
    let mut blank = lines[0].to_string() + "\n";
    for _ in 0..12 {
        blank.push_str(",40,40,40,40,40\n");
    }
    let blank_input = dir.path().join("blank.csv");
    fs::write(&blank_input, &blank).unwrap();
    let p3 = dir.path().join("p3");
    ok(&["predict", "--checkpoint", s(&ckpt), "--input", s(&blank_input), "--out", s(&p3)]);
    let rows = csv_rows(&read(p3.join("forecast.csv")));
    assert_eq!(rows[0].last().unwrap(), "warning");
    assert_eq!(rows[1].last().unwrap(), "no_observed_input");
    assert_eq!(rows[2].last().unwrap(), "");
    assert!(rows[1..].iter().flat_map(|r| &r[1..13]).all(|v| v.parse::<f64>().unwrap().is_finite()));

    let short = dir.path().join("short.csv");
    fs::write(&short, lines[..5].join("\n")).unwrap();
    let out = ahstn(&["predict", "--checkpoint", s(&ckpt), "--input", s(&short), "--out", s(&dir.path().join("p4"))]);
    assert_eq!(out.status.code(), Some(2));

    let clusters = dir.path().join("clusters");
    let labels = dir.path().join("data/labels.csv");
    ok(&["inspect-clusters", "--checkpoint", s(&ckpt), "--labels", s(&labels), "--out", s(&clusters)]);
    assert_eq!(read(clusters.join("clusters.csv")), read(run.join("assignment.csv")));
    assert!(read(clusters.join("manifest.txt")).contains("purity"));
}

#[test]
fn no_hierarchy_variant_has_no_clustering_block() {
    let (dir, cfg) = workspace("");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--variant", "no-hierarchy"]);
    let manifest = read(run.join("manifest.txt"));
    assert!(manifest.contains("block3"));
    assert!(!manifest.contains("block4"));
    assert!(!run.join("assignment.csv").exists());
    let out = ahstn(&[
        "inspect-clusters",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_split_is_a_usage_error() {
    let (dir, cfg) = workspace("");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let tiny = dir.path().join("tiny.cfg");
    fs::write(
        &tiny,
        read(cfg.clone()) + "train_ratio = 0.79\nval_ratio = 0.2\ntest_ratio = 0.01\n",
    )
    .unwrap();
    let out = ahstn(&[
        "evaluate",
        "--config",
        s(&tiny),
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_covers_boundary_ratios() {
    let (dir, cfg) = workspace("");
    let out_dir = dir.path().join("sweep");
    ok(&["sweep-pcluster", "--config", s(&cfg), "--ratios", "0.01,0.5,1.0", "--out", s(&out_dir)]);
    let rows = csv_rows(&read(out_dir.join("summary.csv")));
    assert_eq!(rows[0].join(","), "p_cluster,clusters,status,mae,rmse,mape,purity,message");
    assert_eq!(rows.len(), 4);
    let clusters: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(clusters, ["1", "3", "6"]);
    assert!(rows[1..].iter().all(|r| r[2] == "ok"), "{rows:?}");

    let out = ahstn(&["sweep-pcluster", "--config", s(&cfg), "--ratios", "0.5", "--out", s(&dir.path().join("s2"))]);
    assert_eq!(out.status.code(), Some(2));
}
