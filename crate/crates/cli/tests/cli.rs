use std::path::Path;
use std::process::{Command, Output};

fn ncseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncseg"))
        .args(args)
        .output()
        .expect("run ncseg")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn synth(dir: &Path, side: &str) {
    let out = ncseg(&["synth", "--out-dir", dir.to_str().unwrap(), "--side", side]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}

#[test]
fn segment_writes_a_label_map_that_loads_as_scribbles() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "32");
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let out = ncseg(&[
        "segment",
        "--image",
        &p("image.png"),
        "--scribbles",
        &p("scribbles.png"),
        "--classes",
        "2",
        "--out",
        &p("lab.png"),
        "--truth",
        &p("truth.png"),
        "--trace",
        &p("trace.csv"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.99);
    assert!(report["energies"]["nc"].as_f64().is_some());

    let labels = ncut_core::load_scribbles(p("lab.png"), 2).unwrap();
    assert!((0..labels.len()).all(|i| labels.label(i).is_some()));
    let trace = std::fs::read_to_string(p("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,pce,nc,kmeans,potts,nel,total\n"));

    // Evaluating the written map reproduces the reported accuracy.
    let eval = ncseg(&[
        "evaluate",
        "--image",
        &p("image.png"),
        "--classes",
        "2",
        "--labels",
        &p("lab.png"),
        "--truth",
        &p("truth.png"),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    let eval: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(eval["accuracy"], report["accuracy"]);
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    let img = dir.path().join("image.png");
    let out = ncseg(&[
        "segment",
        "--image",
        img.to_str().unwrap(),
        "--scribbles",
        "/nonexistent/s.png",
        "--classes",
        "2",
        "--out",
        dir.path().join("l.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("/nonexistent/s.png"));
    assert!(out.stdout.is_empty());
}

#[test]
fn exact_kernel_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "65");
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let out = ncseg(&[
        "segment",
        "--image",
        &p("image.png"),
        "--scribbles",
        &p("scribbles.png"),
        "--classes",
        "2",
        "--kernel",
        "exact",
        "--out",
        &p("l.png"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        text(&out.stderr).contains("exact kernel capped at 4096 pixels"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn clustering_needs_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20");
    let img = dir.path().join("image.png");
    let out = ncseg(&[
        "cluster",
        "--image",
        img.to_str().unwrap(),
        "--k",
        "1",
        "--loss",
        "kmeans",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("need K ≥ 2 for clustering"));
}

#[test]
fn kmeans_clustering_reports_both_energies() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "32");
    let img = dir.path().join("image.png");
    let out = ncseg(&[
        "cluster",
        "--image",
        img.to_str().unwrap(),
        "--k",
        "2",
        "--loss",
        "kmeans",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["lloyd_energy"].as_f64().unwrap() > 0.0);
    assert!(r["ratio"].as_f64().unwrap() <= 1.35);

    let out = ncseg(&[
        "cluster",
        "--image",
        img.to_str().unwrap(),
        "--k",
        "2",
        "--loss",
        "ncut",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["final_nc"].as_f64().unwrap() < r["initial_nc"].as_f64().unwrap());
}

#[test]
fn corrupted_gradient_fails_verification() {
    let out = ncseg(&["verify", "--instances", "2", "--corrupt-gradient"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(
        stdout.lines().any(|l| l.starts_with("FAIL nc_gradient_fd")),
        "{stdout}"
    );

    let out = ncseg(&["verify", "--instances", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
}

#[test]
fn bench_output_shape_and_failure() {
    let out = ncseg(&["bench", "--sizes", "32"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "n,build_ms,filter_ms_per_channel,ratio");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1024,") && lines[1].ends_with(','));

    let out = ncseg(&["bench", "--sizes", "16,32,64"]);
    assert_eq!(text(&out.stdout).lines().count(), 4);

    // An impossible limit turns the linearity check into a failure.
    let out = ncseg(&["bench", "--sizes", "16,64", "--max-ratio", "0.01"]);
    assert_eq!(out.status.code(), Some(1));

    let out = ncseg(&["bench", "--sizes", "8"]);
    assert_eq!(out.status.code(), Some(2));
}
