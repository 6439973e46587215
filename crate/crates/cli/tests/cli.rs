use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stochmatch::output::{sha256_hex, Manifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stochmatch"))
}

fn data(f: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(f)
        .canonicalize()
        .unwrap()
        .display()
        .to_string()
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    bin()
        .args([cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn match_config() -> String {
    format!(
        r#"{{
  "command": "match",
  "seed": 2,
  "data": {{"source": "{}", "target": "{}"}},
  "model": {{"noise": {{"grid": 3, "amplitudes": [[0.04, 0.0], [0.0, 0.04]], "bbox": [[-1.5, -1.5], [1.5, 1.5]]}}}},
  "optimizer": {{"schedule": "finite", "epsilon": 0.03, "n_s": 60, "window": 30}}
}}"#,
        data("ellipse_source.csv"),
        data("ellipse_target.csv")
    )
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = bin().args(["frobnicate", "--config", "x.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("image-match"), "{err}");
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let out = bin().arg("match").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"model": {"lamda": 0.2}}"#);
    let out = run("match", &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lamda"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn config_for_another_command_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &match_config());
    let out = run("em", &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("'match'"));
}

#[test]
fn match_run_writes_hashed_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &match_config());
    let out_dir = dir.path().join("out");
    let out = run("match", &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let manifest = Manifest::from_json(&text).unwrap();
    assert_eq!(manifest.to_json(), text);
    assert!(!manifest.partial);
    assert_eq!(manifest.seed, 2);
    assert_eq!(manifest.command, "match");
    assert_eq!(manifest.inputs.len(), 2);
    let names: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
    for expected in ["diagnostics.csv", "strings.csv", "mean_string.csv", "endpoints.csv", "covariance.csv", "strings.svg"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    for f in &manifest.files {
        let bytes = std::fs::read(out_dir.join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    assert_eq!(manifest.diagnostics["iterations"], 60);

    let strings = std::fs::read_to_string(out_dir.join("strings.csv")).unwrap();
    assert!(strings.starts_with("s,t,i,qx,qy,px,py\n"));
    // 30 window strings x 20 times x 10 landmarks
    assert_eq!(strings.lines().count(), 1 + 30 * 20 * 10);

    let svg = std::fs::read_to_string(out_dir.join("strings.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.has_tag_name("ellipse")));
}

#[test]
fn seed_flag_overrides_config_and_changes_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &match_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run("match", &cfg, &a).status.success());
    let out = bin()
        .args(["match", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", b.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = Manifest::from_json(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.config.seed, 3);
    assert_ne!(
        std::fs::read(a.join("strings.csv")).unwrap(),
        std::fs::read(b.join("strings.csv")).unwrap()
    );
}

#[test]
fn failed_run_leaves_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let small = write(dir.path(), "small.pgm", "P2\n2 2\n255\n0 1 2 3\n");
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"image": {{"source": "{}", "target": "{}"}}}}"#,
            data("triangle_source.pgm"),
            small.display()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run("image-match", &cfg, &out_dir);
    assert_eq!(out.status.code(), Some(1));
    let m = Manifest::from_json(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(m.partial);
    assert!(m.error.unwrap().contains("differ"));
}

#[test]
fn image_match_writes_montage_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"image": {{"source": "{}", "target": "{}", "epsilon": 0.05, "iterations": 5}}}}"#,
            data("triangle_source.pgm"),
            data("triangle_target.pgm")
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run("image-match", &cfg, &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = std::fs::read(out_dir.join("deformed.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    let svg = std::fs::read_to_string(out_dir.join("montage.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let labels: Vec<&str> = doc.descendants().filter(|n| n.has_tag_name("text")).filter_map(|n| n.text()).collect();
    assert_eq!(labels, ["t = 0.00", "t = 0.24", "t = 0.49", "t = 0.75", "t = 1.00"]);
    let velocity = std::fs::read_to_string(out_dir.join("velocity.csv")).unwrap();
    assert!(velocity.starts_with("t,k,x,y,ux,uy\n"));
}

#[test]
fn sample_then_mean_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sample = write(
        dir.path(),
        "s.json",
        &format!(
            r#"{{"data": {{"source": "{}"}}, "model": {{"noise": {{"grid": 3, "amplitudes": [[0.02, 0.0], [0.0, 0.02]]}}}}, "sample": {{"n_samples": 12, "n_steps": 20}}}}"#,
            data("ellipse_source.csv")
        ),
    );
    assert!(run("sample", &sample, &dir.path().join("s")).status.success());
    let samples = std::fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 12 * 10);

    let mean = write(
        dir.path(),
        "m.json",
        r#"{"data": {"observations": "s/samples.csv"}, "model": {"lambda": 0.5, "n_t": 6}, "optimizer": {"epsilon": 0.03, "tol": 1e-5}, "mean": {"outer_iters": 3}}"#,
    );
    let out = run("mean", &mean, &dir.path().join("m"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(dir.path().join("m/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4 * 10);
    roxmltree::Document::parse(&std::fs::read_to_string(dir.path().join("m/mean.svg")).unwrap()).unwrap();
}
