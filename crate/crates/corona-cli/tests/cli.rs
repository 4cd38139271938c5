//! End-to-end tests of the `corona` binary: the full command cycle on a
//! small synthetic dataset, exit-code classes, and flag overrides.

use std::path::Path;
use std::process::{Command, Output};

fn corona() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corona"))
}

fn write_config(root: &Path) -> std::path::PathBuf {
    let config = format!(
        r#"
seed = 5

[paths]
interactions = "{root}/data/interactions.tsv"
train_mask = "{root}/data/train_mask.tsv"
test_mask = "{root}/data/test_mask.tsv"
user_features = "{root}/data/user_features.crnf"
item_features = "{root}/data/item_features.crnf"
user_texts = "{root}/data/user_texts.jsonl"
item_texts = "{root}/data/item_texts.jsonl"
cache_dir = "{root}/cache"
checkpoint_dir = "{root}/ckpt"
bundle_dir = "{root}/bundle"
report = "{root}/report.json"

[llm]
chat = {{ kind = "mock", seed = 2 }}
embedding = {{ kind = "mock", seed = 2 }}
embed_dim_native = 96
retry_base_backoff_ms = 1

[retrieval]
k = 10

[training]
d = 16
dim_e = 2
hidden = 8
learning_rate = 0.005
max_steps = 80
eval_every = 20

[eval]
cutoffs = [10, 20, 50]
runs = 1
ablation_modes = ["corona", "fixed-1hop"]
workers = 1
"#,
        root = root.display()
    );
    let path = root.join("config.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn run_ok(output: Output) -> String {
    assert!(
        output.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn full_cycle_synth_train_recommend_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();

    let out = run_ok(
        corona()
            .args(["synth", "-c", c, "--users", "30", "--items", "40", "--clusters", "3"])
            .args(["--purchases", "6", "--dim", "16"])
            .output()
            .unwrap(),
    );
    assert!(out.contains("wrote synthetic dataset"));

    let out = run_ok(corona().args(["ingest", "-c", c]).output().unwrap());
    assert!(out.contains("ingested 30 users"));
    // Second ingest is a no-op with the same fingerprint.
    let out = run_ok(corona().args(["ingest", "-c", c]).output().unwrap());
    assert!(out.contains("bundle unchanged"));

    let out = run_ok(corona().args(["train-retriever", "-c", c]).output().unwrap());
    assert!(out.contains("retriever checkpoint"));
    assert!(out.contains("llm:"), "gateway accounting printed");

    let out = run_ok(corona().args(["train-gnn", "-c", c]).output().unwrap());
    assert!(out.contains("gnn checkpoint"));

    let out = run_ok(
        corona().args(["recommend", "-c", c, "--user", "u0004", "-n", "5", "--trace"]).output().unwrap(),
    );
    // The trace JSON carries both prompts and the subgraph sizes.
    let json_line = out.lines().find(|l| l.starts_with('{')).expect("json output");
    let parsed: serde_json::Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(parsed["user"], "u0004");
    assert!(parsed["entries"].as_array().map_or(0, Vec::len) <= 5);
    let trace = &parsed["trace"];
    assert!(trace["preference_prompt"].as_str().unwrap().contains("User profile"));
    assert!(trace["intent_prompt"].as_str().unwrap().contains("User history"));
    assert!(trace["stage1_users"].as_u64().unwrap() >= trace["stage2_users"].as_u64().unwrap());

    let out = run_ok(corona().args(["evaluate", "-c", c]).output().unwrap());
    assert!(out.contains("corona"));
    assert!(out.contains("report written"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["modes"].as_array().unwrap().len(), 3, "three cutoffs for one mode");

    let out = run_ok(corona().args(["cache", "-c", c, "inspect"]).output().unwrap());
    assert!(out.contains("entries"));
    let out = run_ok(corona().args(["cache", "-c", c, "clear"]).output().unwrap());
    assert!(out.contains("cleared"));
}

#[test]
fn evaluate_before_training_exits_with_missing_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    run_ok(
        corona()
            .args(["synth", "-c", c, "--users", "12", "--items", "15", "--clusters", "3"])
            .args(["--purchases", "4", "--dim", "16"])
            .output()
            .unwrap(),
    );
    let out = corona().args(["evaluate", "-c", c]).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "missing checkpoint is exit code 4");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
}

#[test]
fn unknown_user_and_bad_flags_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    run_ok(
        corona()
            .args(["synth", "-c", c, "--users", "12", "--items", "15", "--clusters", "3"])
            .args(["--purchases", "4", "--dim", "16"])
            .output()
            .unwrap(),
    );
    run_ok(corona().args(["train-retriever", "-c", c]).output().unwrap());
    run_ok(corona().args(["train-gnn", "-c", c]).output().unwrap());

    let out =
        corona().args(["recommend", "-c", c, "--user", "ghost", "-n", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown user is a validation error");

    // Flag override feeds validation: k below the minimum breadth.
    let out = corona().args(["evaluate", "-c", c, "--k", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "k=1 violates the k>=2 invariant");
}

#[test]
fn missing_input_files_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    let out = corona().args(["ingest", "-c", c]).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "missing interactions file");
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = \"not a number\"").unwrap();
    let out = corona().args(["ingest", "-c", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_runs_configured_modes_and_orders_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    run_ok(
        corona()
            .args(["synth", "-c", c, "--users", "30", "--items", "40", "--clusters", "3"])
            .args(["--purchases", "6", "--dim", "16"])
            .output()
            .unwrap(),
    );
    let out = run_ok(
        corona()
            .args(["ablate", "-c", c, "--modes", "corona,fixed-1hop", "--out"])
            .arg(dir.path().join("ablation.json"))
            .output()
            .unwrap(),
    );
    assert!(out.contains("corona"));
    assert!(out.contains("fixed-1hop"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("ablation.json")).unwrap(),
    )
    .unwrap();
    // Two modes x three cutoffs.
    assert_eq!(report["modes"].as_array().unwrap().len(), 6);

    // An unknown mode is rejected up front.
    let out = corona().args(["ablate", "-c", c, "--modes", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
