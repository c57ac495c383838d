use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use weakpose::body::BodyModel;

fn weakpose(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakpose"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("WEAKPOSE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = weakpose(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(cwd: &Path, dir: &str, seed: &str) {
    ok(
        &["synth", "--seed", seed, "--n-train", "12", "--n-test", "4", "--n-source", "100", "--out", dir],
        cwd,
    );
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", "7");
    synth(tmp.path(), "b", "7");
    let a = fs::read(tmp.path().join("a/manifest.json")).unwrap();
    let b = fs::read(tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    synth(tmp.path(), "c", "8");
    assert_ne!(a, fs::read(tmp.path().join("c/manifest.json")).unwrap());
}

#[test]
fn train_then_eval_records_the_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, "ds", "3");
    ok(
        &["train", "--dataset", "ds", "--ablation", "noPrior", "--epochs", "2", "--stage2-epoch", "1", "--out", "run"],
        p,
    );
    for f in ["checkpoint.json", "metrics.csv", "config.toml", "run.json", "checkpoints/epoch_002.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# config_hash="));
    assert!(metrics.contains("seed=0"));

    let out = ok(&["eval", "--dataset", "ds", "--checkpoint", "run/checkpoint.json", "--out", "ev"], p);
    assert!(String::from_utf8_lossy(&out.stdout).contains("noPrior pa_mpjpe"));
    let summary = fs::read_to_string(p.join("ev/summary.csv")).unwrap();
    assert!(summary.contains("# lambda_theta0=0e0"));
    assert!(summary.contains("# config_hash="));
    assert!(summary.contains("# seed=0"));
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("noPrior,")));
    let report = fs::read_to_string(p.join("ev/report.csv")).unwrap();
    assert!(report.starts_with('#'));

    // The checkpoint belongs to a different dataset.
    synth(p, "other", "4");
    let out = weakpose(&["eval", "--dataset", "other", "--checkpoint", "run/checkpoint.json", "--out", "ev2"], p);
    assert_eq!(out.status.code(), Some(5));

    // The configuration does not match the checkpoint.
    let out = weakpose(
        &["eval", "--dataset", "ds", "--checkpoint", "run/checkpoint.json", "--config", "run/config.toml", "--seed", "9", "--out", "ev3"],
        p,
    );
    assert_eq!(out.status.code(), Some(5));

    ok(&["render", "--dataset", "ds", "--checkpoint", "run/checkpoint.json", "--index", "1", "--out", "rd"], p);
    for f in ["depth.pfm", "depth.pgm", "mask.pgm", "provenance.json"] {
        assert!(p.join("rd").join(f).exists(), "{f}");
    }
    ok(&["export-mesh", "--dataset", "ds", "--checkpoint", "run/checkpoint.json", "--out", "pred.obj"], p);
    assert!(fs::read_to_string(p.join("pred.obj")).unwrap().contains("dataset_hash="));
}

#[test]
fn rest_mesh_export_matches_the_template() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["export-mesh", "--out", "rest.obj"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("rest.obj")).unwrap();
    let model = BodyModel::procedural();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), model.num_vertices());
    assert_eq!(
        text.lines().filter(|l| l.starts_with("f ")).count(),
        model.template().triangles.len()
    );
    assert!(text.contains("# config_hash="));
    // y-up: the head is above the feet.
    let ys: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("v "))
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    let top = ys.iter().cloned().fold(f64::MIN, f64::max);
    let bottom = ys.iter().cloned().fold(f64::MAX, f64::min);
    assert!(top > 500.0 && bottom < -500.0, "{top} {bottom}");
}

#[test]
fn fit_one_and_probe_write_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    synth(p, "ds", "5");
    ok(&["fit-one", "--dataset", "ds", "--index", "2", "--out", "f"], p);
    let trace = fs::read_to_string(p.join("f/trace.csv")).unwrap();
    let header = trace.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("iteration,objective,theta0"));
    assert!(header.ends_with("scale,tx,ty"));
    let rows = trace.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert!(rows > 10);

    ok(&["bias-probe", "--dataset", "ds", "--out", "bp"], p);
    let hist = fs::read_to_string(p.join("bp/bias_histogram.csv")).unwrap();
    assert!(hist.contains("bin_start,bin_end,type1,type2"));
    assert!(hist.contains("# seed=5"));

    ok(&["fit-prior", "--dataset", "ds", "--components", "2", "--out", "prior.json"], p);
    let prior = fs::read_to_string(p.join("prior.json")).unwrap();
    assert!(prior.contains("\"dataset_hash\""));
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("bad.toml"), "epochs = \"many\"\n").unwrap();
    let out = weakpose(&["train", "--dataset", "ds", "--config", "bad.toml", "--out", "r"], p);
    assert_eq!(out.status.code(), Some(2));
    let out = weakpose(&["train", "--dataset", "ds", "--ablation", "fancy", "--out", "r"], p);
    assert_eq!(out.status.code(), Some(2));
    let out = weakpose(&["train", "--dataset", "missing", "--out", "r"], p);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}
