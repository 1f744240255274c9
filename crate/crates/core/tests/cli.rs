use std::path::Path;
use std::process::{Command, Output};

use aqi_core::config::RunConfig;
use serde_json::Value;

fn aqi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = aqi(args);
    assert!(
        out.status.success(),
        "aqi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(aqi(&[]).status.code(), Some(1));
    assert_eq!(aqi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aqi(&["train", "--model", "svm", "--data", "x.csv", "--out", "m.json"]).status.code(), Some(1));
    assert_eq!(aqi(&["--preset", "huge", "synth", "--out", "x"]).status.code(), Some(1));
    assert_eq!(aqi(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_one_and_missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"windw": 3}"#).unwrap();
    let out = aqi(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("windw"));

    let missing = dir.path().join("none.csv");
    let out = aqi(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn end_to_end_with_config_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");

    let mut cfg = RunConfig::desk();
    cfg.window = 6;
    cfg.seed = 7;
    cfg.forest.n_estimators = 5;
    cfg.eval_models = vec![];
    let cfg_path = d.join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg.to_value()).unwrap()).unwrap();
    let c = p(&cfg_path);

    ok(&["--config", c, "synth", "--out", p(&corpus), "--devices", "3", "--months", "3"]);
    ok(&[
        "profile",
        "--image",
        p(&corpus.join("tiles")),
        "--legend",
        p(&corpus.join("legend.json")),
        "--out",
        p(&corpus.join("profiles")),
    ]);
    assert_eq!(std::fs::read_dir(corpus.join("profiles")).unwrap().count(), 3);

    let data = corpus.join("dataset.csv");
    let model = d.join("model.json");
    ok(&["--config", c, "train", "--model", "rf-t", "--data", p(&data), "--out", p(&model)]);
    let art = read_json(&model);
    let mut effective = cfg.clone();
    effective.model = aqi_core::model::ModelKind::RfT;
    assert_eq!(art["run_config"], effective.to_value());
    assert_eq!(art["seed"], 7);
    assert_eq!(art["manifest"]["window"], 6);

    // the seed flag wins over the file
    let loo = d.join("loo.json");
    ok(&[
        "--config", c, "--seed", "9", "eval", "--protocol", "loo", "--model", "rf", "--data", p(&data), "--out",
        p(&loo),
    ]);
    let rep = read_json(&loo);
    assert_eq!(rep["seed"], 9);
    assert_eq!(rep["run_config"]["seed"], 9);
    assert_eq!(rep["run_config"]["forest"]["n_estimators"], 5);
    assert_eq!(rep["body"]["folds"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(d.join("loo.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let req = d.join("req.csv");
    let mut body = String::from("location,timestamp,temperature,humidity\n");
    for h in 0..8 {
        body.push_str(&format!("dev01,2021-09-01T{h:02}:00:00Z,28.5,90.0\n"));
    }
    std::fs::write(&req, body).unwrap();
    let ann = d.join("ann.csv");
    ok(&[
        "annotate",
        "--model",
        p(&model),
        "--weather",
        p(&corpus.join("weather.csv")),
        "--locations",
        p(&corpus.join("devices.json")),
        "--input",
        p(&req),
        "--out",
        p(&ann),
    ]);
    let text = std::fs::read_to_string(&ann).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    assert!(lines[0].ends_with("status") || lines[0].contains(",status"));
    assert!(lines[1].contains("padded"));
    assert!(lines[6].contains("complete"));
}
