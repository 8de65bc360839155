//! End-to-end tests against the compiled binary: artifact round-trips,
//! determinism, exit codes, and the prerequisite-command error messages.

use std::path::Path;
use std::process::Command;

use seqrec::data::{load_catalog, load_interactions};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seqrec")
}

/// Overrides that shrink every stage to seconds on one core.
fn small_run(dir: &Path, seed: u64) -> Vec<String> {
    let mut args = vec![
        "--out".into(),
        dir.display().to_string(),
        "--seed".into(),
        seed.to_string(),
    ];
    for set in [
        "synth.num_users=60",
        "synth.num_items=30",
        "synth.d_text=10",
        "synth.d_image=8",
        "synth.num_clusters=4",
        "model.max_seq_len=16",
        "model.latent_dim=16",
        "model.num_heads=2",
        "model.lora_rank=2",
        "align.sft_epochs=5",
        "align.embed_dim=10",
        "train.stage1.epochs_max=3",
        "train.stage1.batch_size=64",
        "train.stage2.epochs_max=2",
        "train.stage2.batch_size=128",
        "eval.batch_size=64",
    ] {
        args.push("--set".into());
        args.push(set.into());
    }
    args
}

struct Finished {
    code: i32,
    stdout: String,
    stderr: String,
}

fn seqrec(subcommand: &[&str], common: &[String]) -> Finished {
    let output = Command::new(bin())
        .args(subcommand)
        .args(common)
        .output()
        .expect("binary spawns");
    Finished {
        code: output.status.code().expect("no signal"),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn expect_ok(subcommand: &[&str], common: &[String]) -> Finished {
    let run = seqrec(subcommand, common);
    assert_eq!(
        run.code, 0,
        "`seqrec {}` failed\nstdout: {}\nstderr: {}",
        subcommand.join(" "),
        run.stdout,
        run.stderr
    );
    run
}

#[test]
fn synth_artifacts_load_back_and_rerun_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 11);
    expect_ok(&["synth"], &common);

    let catalog_path = dir.path().join("catalog.jsonl");
    let catalog = load_catalog(&catalog_path).unwrap();
    assert_eq!(catalog.num_items(), 30);
    let log = load_interactions(&dir.path().join("interactions.csv"), &catalog).unwrap();
    assert_eq!(log.num_users(), 60);

    let first = std::fs::read(&catalog_path).unwrap();
    expect_ok(&["synth"], &common);
    assert_eq!(first, std::fs::read(&catalog_path).unwrap(), "re-run changed the catalog");
}

#[test]
fn invalid_spec_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut common = small_run(dir.path(), 11);
    common.push("--set".into());
    common.push("synth.signal_strength=1.5".into());
    let run = seqrec(&["synth"], &common);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("signal_strength"), "stderr: {}", run.stderr);
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, "[model]\nlatent_dims = 48\n").unwrap();
    let run = seqrec(
        &["synth", "--config", config_path.to_str().unwrap()],
        &["--out".into(), dir.path().display().to_string()],
    );
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("latent_dims"), "stderr: {}", run.stderr);
}

#[test]
fn missing_artifacts_name_the_prerequisite_command() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 11);

    let run = seqrec(&["pairs"], &common);
    assert_eq!(run.code, 3, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("run `seqrec synth` first"), "stderr: {}", run.stderr);

    expect_ok(&["synth"], &common);
    let run = seqrec(&["sft"], &common);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("run `seqrec pairs` first"), "stderr: {}", run.stderr);

    let run = seqrec(&["train", "--stage", "2"], &common);
    assert_eq!(run.code, 3);
    assert!(
        run.stderr.contains("run `seqrec train --stage 1` first"),
        "stderr: {}",
        run.stderr
    );

    let run = seqrec(&["eval"], &common);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("run `seqrec train` first"), "stderr: {}", run.stderr);
}

#[test]
fn full_pipeline_is_deterministic_across_directories() {
    let run_all = |dir: &Path| {
        let common = small_run(dir, 23);
        expect_ok(&["synth"], &common);
        expect_ok(&["pairs"], &common);
        expect_ok(&["sft"], &common);
        expect_ok(&["train", "--stage", "1"], &common);
        expect_ok(&["train", "--stage", "2"], &common);
        expect_ok(&["eval", "--split", "valid"], &common);
        expect_ok(&["eval", "--split", "test"], &common);
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());

    for artifact in [
        "reports/eval_valid.json",
        "reports/eval_test.json",
        "reports/ranks_valid.csv",
        "reports/ranks_test.csv",
        "checkpoints/stage2.json",
    ] {
        let left = std::fs::read(a.path().join(artifact)).unwrap();
        let right = std::fs::read(b.path().join(artifact)).unwrap();
        assert_eq!(left, right, "{artifact} differs between identical runs");
    }
}

#[test]
fn eval_and_bench_work_on_a_stage1_only_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 31);
    expect_ok(&["synth"], &common);
    expect_ok(&["train", "--stage", "1"], &common);

    let run = expect_ok(&["eval", "--split", "valid"], &common);
    assert!(run.stdout.contains("NDCG@10"), "stdout: {}", run.stdout);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("reports/eval_valid.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["split"], "valid");
    assert_eq!(report["metrics"].as_array().unwrap().len(), 2);

    expect_ok(&["bench"], &common);
    let bench: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("reports/bench.json")).unwrap(),
    )
    .unwrap();
    assert!(bench["scaling"]["exponent"].as_f64().unwrap().is_finite());
}

#[test]
fn train_strategy_runs_a_schedule_and_eval_finds_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 41);
    expect_ok(&["synth"], &common);
    expect_ok(&["pairs"], &common);
    expect_ok(&["sft"], &common);
    let run = expect_ok(&["train", "--strategy", "end2end"], &common);
    assert!(run.stdout.contains("[end2end]"), "stdout: {}", run.stdout);
    assert!(dir.path().join("checkpoints/end2end.json").is_file());
    expect_ok(&["eval", "--split", "valid"], &common);
}

#[test]
fn conflicting_train_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 11);
    let run = seqrec(&["train", "--stage", "1", "--strategy", "end2end"], &common);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
}

#[test]
fn manifests_differ_only_in_the_timing_fields() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 47);
    expect_ok(&["synth"], &common);
    let manifest_path = dir.path().join("reports/manifest_synth.json");
    let first: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    expect_ok(&["synth"], &common);
    let second: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();

    let timing_only = ["started_unix_ms", "wall_time_s"];
    for (key, value) in first.as_object().unwrap() {
        if timing_only.contains(&key.as_str()) {
            continue;
        }
        assert_eq!(value, &second[key], "manifest field {key} changed between identical runs");
    }
}

#[test]
fn dotted_overrides_shape_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut common = small_run(dir.path(), 11);
    common.push("--set".into());
    common.push("synth.num_items=17".into());
    expect_ok(&["synth"], &common);
    let lines = std::fs::read_to_string(dir.path().join("catalog.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 17);
}

#[test]
fn unknown_eval_split_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let common = small_run(dir.path(), 11);
    let run = seqrec(&["eval", "--split", "holdout"], &common);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("holdout"), "stderr: {}", run.stderr);
}
