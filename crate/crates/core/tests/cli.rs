use std::path::Path;
use std::process::{Command, Output};

use safeshield_core::io;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safeshield"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn golden(name: &str) -> String {
    format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let out = run(&["learn", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--corpus") && err.contains("Usage"), "{err}");
}

#[test]
fn invalid_corpus_exits_two_listing_violations() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(golden("corpus_small.json")).unwrap();
    let corpus = io::corpus_from_str(&text).unwrap();
    let mut broken = corpus.clone();
    // a failure labeled with a positive reward and a point of the wrong size
    let f = broken.demos.iter_mut().find(|d| d.is_failure()).unwrap();
    f.outcome = Some(safeshield_core::demonstrations::Outcome::Failure);
    f.reward = 0.5;
    broken.demos[0].points[0].x.push(0.0);
    io::save_corpus(&bad, &broken).unwrap();
    let out = run(&["learn", "--corpus", p(&bad), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("failure reward must be negative"), "{err}");
    assert!(err.contains("dimension"), "{err}");
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn unsupported_schema_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    let text = std::fs::read_to_string(golden("corpus_small.json")).unwrap();
    std::fs::write(&c, text.replace("\"schema_version\": 1", "\"schema_version\": 99")).unwrap();
    let out = run(&["learn", "--corpus", p(&c), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("99"));
}

#[test]
fn unknown_scenario_preset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate-demos", "--scenario", "nope", "--out", p(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_learn_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = run(&["learn", "--corpus", &golden("corpus_small.json"), "--config", &golden("learn_config.json"), "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);

    let o = run(&["generate-demos", "--scenario", "default", "--seed", "7", "--out", p(&d("c.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let corpus = io::load_corpus(&d("c.json")).unwrap();
    assert!(corpus.validate().is_empty());

    std::fs::write(d("cfg.json"), r#"{"C": 1, "gamma_dyn": 0.1, "alpha_gain": 1}"#).unwrap();
    let o = run(&[
        "learn", "--corpus", p(&d("c.json")), "--config", p(&d("cfg.json")), "--out", p(&d("m.json")), "--result", p(&d("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let model = io::load_model(&d("m.json")).unwrap();
    assert_eq!(model.corpus_digest, io::corpus_digest(&corpus).unwrap());
    assert_eq!(model.learn_config_echo.slack_penalty, 1.0);

    let o = run(&[
        "eval-grid", "--model", p(&d("m.json")), "--out", p(&d("g.json")), "--pgm", p(&d("g.pgm")),
        "--corpus", p(&d("c.json")), "--result", p(&d("r.json")), "--metrics", p(&d("metrics.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = io::load_metrics(&d("metrics.json")).unwrap();
    assert!(metrics.obstacle_coverage.unwrap() >= 0.9, "{metrics:?}");
    assert!(std::fs::read(d("g.pgm")).unwrap().starts_with(b"P5\n100 100\n"));

    let start = &corpus.demos.iter().find(|d| !d.is_failure()).unwrap().points[0].x;
    let x0 = format!("{},{}", start[0], start[1]);
    let o = run(&["filter-sim", "--model", p(&d("m.json")), "--x0", &x0, "--steps", "300", "--out", p(&d("sim.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sim: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("sim.json")).unwrap()).unwrap();
    assert!(sim["min_h"].as_f64().unwrap() >= -0.05, "{}", sim["min_h"]);
    assert!(sim["intervention_rate"].as_f64().unwrap() > 0.0);
    assert_eq!(sim["rollout"]["states"].as_array().unwrap().len(), 301);

    // τ from acceptable demos
    let o = run(&[
        "filter-sim", "--model", p(&d("m.json")), "--x0", &x0, "--steps", "10", "--out", p(&d("sim2.json")),
        "--corpus", p(&d("c.json")), "--acceptable", "safe-00,semisafe-00",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sim: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("sim2.json")).unwrap()).unwrap();
    let expect = corpus.demos.iter().filter(|d| d.id == "semisafe-00" || d.id == "safe-00").map(|d| d.reward).fold(f64::INFINITY, f64::min);
    assert_eq!(sim["tau"].as_f64().unwrap(), expect);

    let o = run(&["filter-sim", "--model", p(&d("m.json")), "--x0", "0.1", "--out", p(&d("sim3.json"))]);
    assert_eq!(o.status.code(), Some(1));
}
