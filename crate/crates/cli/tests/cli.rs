use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[model]
num_layers = 6
d_model = 64
ffn_neurons_per_layer = 256
attention_params_per_layer = 16384
other_params = 0
active_per_layer = 32

[trace.synthetic]
num_tokens = 6
overlap = 0.7
"#;

fn tierlm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tierlm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = tierlm(&["--print-defaults"], dir.path());
    ok(&out);
    fs::write(dir.path().join("defaults.toml"), &out.stdout).unwrap();
    let out = tierlm(&["gen-trace", "--config", "defaults.toml", "--out", "o"], dir.path());
    ok(&out);
    assert!(dir.path().join("o/trace.jsonl").exists());
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = setup("[engine]\nlookahead = 0\n");
    let out = tierlm(&["simulate", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("engine.lookahead"));

    fs::write(dir.path().join("typo.json"), r#"{"model": {"num_layer": 4}}"#).unwrap();
    let out = tierlm(&["simulate", "--config", "typo.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tierlm(&[], dir.path()).status.code(), Some(2));
    assert_eq!(tierlm(&["simulate", "--nope"], dir.path()).status.code(), Some(2));
    assert_eq!(tierlm(&["simulate", "--seed", "x"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_or_mismatched_trace_exits_2() {
    let dir = setup("");
    let out = tierlm(
        &["simulate", "--config", "run.toml", "--trace", "absent.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    ok(&tierlm(
        &["gen-trace", "--trace", "big.jsonl", "--config", "run.toml"],
        dir.path(),
    ));
    fs::write(
        dir.path().join("other.toml"),
        SMALL.replace("num_layers = 6", "num_layers = 5"),
    )
    .unwrap();
    let out = tierlm(
        &["simulate", "--config", "other.toml", "--trace", "big.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reports_are_deterministic_apart_from_timestamp() {
    let dir = setup("");
    for out_dir in ["a", "b"] {
        ok(&tierlm(
            &["simulate", "--config", "run.toml", "--seed", "7", "--out", out_dir],
            dir.path(),
        ));
    }
    let mut a = read_json(&dir.path().join("a/report.json"));
    let mut b = read_json(&dir.path().join("b/report.json"));
    for r in [&mut a, &mut b] {
        assert!(r["generated_at"].is_string());
        let obj = r.as_object_mut().unwrap();
        obj.remove("generated_at");
        obj["config"]["output"].as_object_mut().unwrap().remove("dir");
    }
    assert_eq!(a, b);
    assert_eq!(a["config"]["engine"]["prediction_seed"], 7);

    ok(&tierlm(
        &["simulate", "--config", "run.toml", "--seed", "8", "--out", "c"],
        dir.path(),
    ));
    let c = read_json(&dir.path().join("c/report.json"));
    assert_ne!(a["trace"]["fingerprint"], Value::Null);
    assert_ne!(a["metrics"], c["metrics"]);
}

#[test]
fn trace_file_reproduces_the_synthetic_run() {
    let dir = setup("");
    ok(&tierlm(
        &[
            "gen-trace",
            "--config",
            "run.toml",
            "--seed",
            "3",
            "--trace",
            "t/trace.jsonl",
        ],
        dir.path(),
    ));
    ok(&tierlm(
        &["simulate", "--config", "run.toml", "--seed", "3", "--out", "syn"],
        dir.path(),
    ));
    ok(&tierlm(
        &[
            "simulate",
            "--config",
            "run.toml",
            "--seed",
            "3",
            "--trace",
            "t/trace.jsonl",
            "--out",
            "file",
        ],
        dir.path(),
    ));
    let syn = read_json(&dir.path().join("syn/report.json"));
    let file = read_json(&dir.path().join("file/report.json"));
    assert_eq!(syn["metrics"], file["metrics"]);
    assert_eq!(syn["trace"], file["trace"]);
}

#[test]
fn emit_timeline_writes_csvs() {
    let dir = setup("");
    ok(&tierlm(
        &["simulate", "--config", "run.toml", "--out", "o", "--emit-timeline"],
        dir.path(),
    ));
    let steps = fs::read_to_string(dir.path().join("o/steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1 + 6 * 6);
    let hits = fs::read_to_string(dir.path().join("o/hits.csv")).unwrap();
    assert!(hits.starts_with("token,layer,hits,misses,bytes"));
    assert!(dir.path().join("o/transfers.csv").exists());
}

#[test]
fn search_ratio_writes_trajectory_and_reusable_plan() {
    let dir = setup("");
    ok(&tierlm(
        &["search-ratio", "--config", "run.toml", "--out", "s"],
        dir.path(),
    ));
    let report = read_json(&dir.path().join("s/search.json"));
    let trajectory = report["search"]["trajectory"].as_array().unwrap();
    assert_eq!(trajectory.len(), 5);
    let best = &report["search"]["best"];
    assert!((best["r_high"].as_f64().unwrap() - 0.15).abs() < 1e-9);
    assert!((best["r_low"].as_f64().unwrap() - 0.4).abs() < 1e-9);

    ok(&tierlm(
        &[
            "simulate",
            "--config",
            "run.toml",
            "--plan",
            "s/plan.json",
            "--out",
            "p",
        ],
        dir.path(),
    ));
    let sim = read_json(&dir.path().join("p/report.json"));
    let plan = read_json(&dir.path().join("s/plan.json"));
    assert_eq!(sim["config"]["engine"]["plan"], plan);
}

#[test]
fn kclass_search_covers_the_grid() {
    let dir = setup("[search.kclass]\nstep = 0.25\nbudget_bits = 4.0\n");
    ok(&tierlm(
        &["search-ratio", "--config", "run.toml", "--out", "k"],
        dir.path(),
    ));
    let report = read_json(&dir.path().join("k/search.json"));
    let evaluated = report["search"]["evaluated"].as_array().unwrap();
    assert!(!evaluated.is_empty());
    for p in evaluated {
        let f: Vec<f64> = p["fractions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let bits = 16.0 * f[0] + 8.0 * f[1] + 4.0 * f[2];
        assert!((bits - 4.0).abs() < 1e-9);
    }
}

#[test]
fn ablate_and_simulate_ablation_agree() {
    let dir = setup("");
    ok(&tierlm(&["ablate", "--config", "run.toml", "--out", "a"], dir.path()));
    ok(&tierlm(
        &["simulate", "--ablation", "--config", "run.toml", "--out", "b"],
        dir.path(),
    ));
    let a = read_json(&dir.path().join("a/ablation.json"));
    let b = read_json(&dir.path().join("b/ablation.json"));
    let rows = a["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "+mp", "+cache", "+ssd"]);
    assert_eq!(a["rows"], b["rows"]);
    let csv = fs::read_to_string(dir.path().join("a/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn sweep_runs_every_point() {
    let extra = "[[sweep]]\nengine = { lookahead = 1, host = { mode = \"tiered\" } }\n\
                 [[sweep]]\nengine = { lookahead = 3, host = { mode = \"tiered\" } }\n\
                 [[sweep]]\ntrace = { synthetic = { overlap = 0.2 } }\n";
    let dir = setup(extra);
    ok(&tierlm(&["sweep", "--config", "run.toml", "--out", "w"], dir.path()));
    let report = read_json(&dir.path().join("w/sweep.json"));
    let points = report["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(points[2]["trace"]["tokens"], 6);
    let csv = fs::read_to_string(dir.path().join("w/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn sweep_without_points_exits_2() {
    let dir = setup("");
    let out = tierlm(&["sweep", "--config", "run.toml", "--out", "w"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
