use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn catbert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catbert"))
        .current_dir(dir)
        .env("CATBERT_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = catbert(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn no_arguments_print_usage_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = catbert(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = catbert(dir.path(), &["params", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = catbert(dir.path(), &["eval", "--model", "missing", "--data", "none.jsonl", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = catbert(dir.path(), &["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--freeze"));
}

#[test]
fn params_report_for_the_catbert_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("catbert.json");
    let text = ok(dir.path(), &["params", "--config", config.to_str().unwrap()]);
    let line = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap().split_whitespace().collect::<Vec<_>>();
    assert_eq!(line("embedding")[1..], ["92206848", "92.2"]);
    assert_eq!(line("non-embedding")[1..], ["25401601", "25.4"]);
    assert_eq!(line("total")[1..], ["117608449", "117.6"]);

    let json = ok(dir.path(), &["params", "--preset", "distilbert", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["total"], 135_325_441);
}

#[test]
fn predict_writes_one_probability_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "syn", "--records", "200", "--malicious-fraction", "0.25"]);
    ok(d, &["init", "--preset", "tiny", "--vocab", "syn/vocab.txt", "--out", "model"]);
    let lines: Vec<String> = fs::read_to_string(d.join("syn/data.jsonl"))
        .unwrap()
        .lines()
        .take(5)
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("label");
            v.to_string()
        })
        .collect();
    fs::write(d.join("one.jsonl"), lines.join("\n") + "\n").unwrap();
    let out = ok(d, &["predict", "--model", "model", "--in", "one.jsonl"]);
    let probs: Vec<f64> = out
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["prob"].as_f64().unwrap())
        .collect();
    assert_eq!(probs.len(), 5);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0), "{probs:?}");
}

#[test]
fn every_run_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "syn", "--records", "300", "--seed", "2"]);
    ok(d, &["split", "--in", "syn/data.jsonl", "--out", "split"]);
    ok(d, &["ingest", "--in", "split/test.jsonl", "--out", "features.jsonl"]);
    ok(d, &["train", "--baseline", "--data", "split/train.jsonl", "--validation", "split/validation.jsonl", "--out", "lr"]);
    ok(d, &["eval", "--model", "lr", "--data", "split/test.jsonl", "--out", "metrics.json"]);
    for path in ["syn/run.json", "split/run.json", "features.jsonl.run.json", "lr/run.json", "metrics.json.run.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(path)).unwrap()).unwrap();
        for key in ["subcommand", "tool_version", "seed", "config", "inputs", "outputs", "duration_ms"] {
            assert!(v.get(key).is_some(), "{path} lacks {key}");
        }
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    for key in ["auc", "tpr_at_fpr", "groups", "runs"] {
        assert!(m.get(key).is_some(), "metrics lack {key}");
    }
    let feature: serde_json::Value =
        serde_json::from_str(fs::read_to_string(d.join("features.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(feature["context"]["external"].is_u64());
}

#[test]
fn surgery_keeps_donor_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init", "--preset", "tiny", "--plan", "T,T,T,T,T,T", "--out", "donor"]);
    ok(d, &["surgery", "--donor", "donor", "--keep", "0,2,4", "--zero-adapters", "--out", "small"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("small/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["surgery"]["keep"], serde_json::json!([0, 2, 4]));
    let bad = catbert(d, &["surgery", "--donor", "donor", "--keep", "0,9", "--out", "bad"]);
    assert_eq!(bad.status.code(), Some(2));
}
