//! End-to-end runs of the `deblur3d` binary on a tiny synthetic scene.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deblur3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn count_png(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn missing_input_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "fit",
        "--frames",
        "/nonexistent/frames",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    ok(&[
        "synth",
        "--seed",
        "1",
        "--size",
        "32",
        "--n-frames",
        "2",
        "--out",
        scene.to_str().unwrap(),
    ]);
    let out = run(&[
        "fit",
        "--frames",
        scene.join("frames").to_str().unwrap(),
        "--set",
        "no_such_key=1",
        "--out",
        tmp.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_fit_render_tsr_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let scene = p("scene");
    ok(&[
        "synth",
        "--seed",
        "3",
        "--size",
        "32",
        "--n-frames",
        "2",
        "--subframes",
        "4",
        "--factor",
        "3",
        "--out",
        &scene,
    ]);
    assert_eq!(count_png(&tmp.path().join("scene/frames")), 2);

    let fit = p("fit");
    ok(&[
        "fit",
        "--frames",
        &format!("{scene}/frames"),
        "--masks",
        &format!("{scene}/masks"),
        "--background",
        &format!("{scene}/background.png"),
        "--subframes",
        "4",
        "--set",
        "iterations=4",
        "--set",
        "preopt_iterations=2",
        "--set",
        "texture_size=8",
        "--set",
        "prototypes=sphere-low",
        "--out",
        &fit,
    ]);
    for f in ["manifest.json", "motion.json", "loss.csv", "mesh.obj"] {
        assert!(tmp.path().join("fit").join(f).is_file(), "missing {f}");
    }
    let loss = std::fs::read_to_string(tmp.path().join("fit/loss.csv")).unwrap();
    assert!(loss.starts_with("iteration,phase,video"));

    let rendered = p("render");
    ok(&["render", "--fit", &fit, "--out", &rendered]);
    assert_eq!(count_png(&tmp.path().join("render/frames")), 2);

    let tsr = p("tsr");
    ok(&[
        "tsr", "--fit", &fit, "--factor", "3", "--out", &tsr, "--gt", &scene,
    ]);
    assert_eq!(count_png(&tmp.path().join("tsr/frames")), 6);
    assert!(tmp.path().join("tsr/tsr_metrics.csv").is_file());

    let report = p("eval.csv");
    ok(&["eval", "--fit", &fit, "--gt", &scene, "--out", &report]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("eval.json")).unwrap())
            .unwrap();
    assert!(json["summary"]["translation_error"]
        .as_f64()
        .unwrap()
        .is_finite());
}
