use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_firmcascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn arch_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic").join(format!("{name}.json"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, fast experiment over a synthetic dataset.
fn small_config(dir: &Path, arch: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "architecture": arch_path(arch),
        "dataset": { "kind": "synthetic", "n": 400, "seed": 1 },
        "lambda_grid": [0.0, 0.01],
        "train": { "epochs": 3, "batch_size": 32, "init_epochs_per_stage": 1 },
        "folds": 2,
        "seed": 7,
        "timing_repetitions": 0
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_csv_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--n", "200", "--seed", "3", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("synthetic.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 38);
    let schema = dir.path().join("schema.json");
    let o = run(&["validate-config", s(&schema)]);
    assert!(o.status.success(), "{}", stderr(&o));

    // same seed, same bytes
    let again = tempfile::tempdir().unwrap();
    assert!(run(&["gen-data", "--n", "200", "--seed", "3", "--out", s(again.path())]).status.success());
    assert_eq!(csv, std::fs::read_to_string(again.path().join("synthetic.csv")).unwrap());
}

#[test]
fn validate_config_accepts_shipped_configs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let o = run(&["validate-config", s(&path)]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("valid"));
    }
}

#[test]
fn validate_config_reports_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    let arch = std::fs::read_to_string(arch_path("c2")).unwrap();
    std::fs::write(&path, &arch).unwrap();
    // c2 reads feature 36
    let o = run(&["validate-config", s(&path), "--features", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("violation"), "{}", stderr(&o));

    std::fs::write(&path, "{ not json").unwrap();
    assert_eq!(run(&["validate-config", s(&path)]).status.code(), Some(1));

    let cfg = small_config(dir.path(), "c2");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"folds\": 2", "\"folds\": 1");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["validate-config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn unreadable_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_config(dir.path(), "c2");
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let schema = dir.path().join("schema.json");
    std::fs::write(&schema, r#"{"label_column": "label"}"#).unwrap();
    let missing = dir.path().join("missing.csv");
    let o = run(&["evaluate", "--model", s(&out.join("model.json")), "--data", s(&missing), "--schema", s(&schema)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_then_evaluate_with_trace_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_config(dir.path(), "c5");
    let o = run(&["train", "--config", s(&cfg), "--lambda", "0.001", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = out.join("model.json");
    assert!(run(&["validate-config", s(&model)]).status.success());

    let data_dir = dir.path().join("data");
    assert!(run(&["gen-data", "--n", "300", "--seed", "5", "--out", s(&data_dir)]).status.success());
    let traces = dir.path().join("traces.jsonl");
    let o = run(&[
        "evaluate",
        "--model",
        s(&model),
        "--data",
        s(&data_dir.join("synthetic.csv")),
        "--schema",
        s(&data_dir.join("schema.json")),
        "--trace-log",
        s(&traces),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["metrics"]["n"], 300);
    let acc = summary["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("metrics.json").exists());

    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&traces).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 300);
    for (i, t) in lines.iter().enumerate() {
        assert_eq!(t["row"], i);
        assert!(t["cost"].as_f64().unwrap() > 0.0);
        assert_eq!(t["executed"].as_array().unwrap().len(), t["passed"].as_array().unwrap().len());
    }

    // evaluating against the config's own dataset works too
    let o = run(&["evaluate", "--model", s(&model), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn sweep_is_deterministic_and_report_reads_it_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["sweep", "--config", s(&cfg), "--deterministic", "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "sweep.csv", "folds.csv", "stages.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(!a.join("partial.json").exists());
    assert_eq!(
        std::fs::read_to_string(a.join("sweep.csv")).unwrap(),
        std::fs::read_to_string(b.join("sweep.csv")).unwrap()
    );

    let c = dir.path().join("c");
    let o = run(&["report", s(&a.join("report.json")), "--out", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("best:"));
    assert_eq!(
        std::fs::read_to_string(a.join("folds.csv")).unwrap(),
        std::fs::read_to_string(c.join("folds.csv")).unwrap()
    );
}

#[test]
fn sweep_compare_soft_writes_both_families() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c2");
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", s(&cfg), "--compare-soft", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("firm/report.json").exists());
    assert!(out.join("soft/report.json").exists());
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert!(cmp.get("firm_best").is_some() && cmp.get("soft_best").is_some());
}

#[test]
fn alpha_study_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c2");
    let out = dir.path().join("out");
    let o = run(&["alpha-study", "--config", s(&cfg), "--alphas", "0.25,32,inf", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("alpha.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("inf,1024,"), "{}", rows[2]);

    let o = run(&["alpha-study", "--config", s(&cfg), "--alphas=-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-verb"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
