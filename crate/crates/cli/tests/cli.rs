//! End-to-end subcommand tests through the compiled binary: exit codes,
//! stdout/stderr contracts, artifact layout, and bitwise reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn vox4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vox4d"))
        .args(args)
        .env_remove("VOX4D_OUTPUT_DIR")
        .output()
        .expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Toy single-modality run configuration against a small phantom set.
fn toy_config(out_dir: &Path, overrides: impl FnOnce(&mut Value)) -> Value {
    let mut cfg = json!({
        "model": {
            "modality": "single",
            "rnn_kind": "gru",
            "seed": 0,
            "fmri_input": [2, 6, 6, 6, 1],
            "fmri_filters": [4, 8, 16],
            "rnn_hidden": 8,
            "embed_width": 8
        },
        "train": { "epochs": 2, "batch_size": 2, "repeats": 1, "seed": 3, "lr": 0.001 },
        "data": { "phantom": { "count": 6, "delta": 0.5, "seed": 50 } },
        "output_dir": out_dir
    });
    overrides(&mut cfg);
    cfg
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

// ───────────────────────────── shape-trace ─────────────────────────────

#[test]
fn shape_trace_prints_stated_shapes_as_text_and_json() {
    let sm = vox4d(&["shape-trace", "sm-gru"]);
    assert_eq!(exit_code(&sm), 0);
    let text = stdout(&sm);
    assert!(text.contains("30x14x14x14x64"), "missing block-1 shape:\n{text}");
    assert!(text.contains("30x6912"), "missing flatten shape:\n{text}");

    let mm = vox4d(&["shape-trace", "mm-lstm", "--mri", "64"]);
    assert_eq!(exit_code(&mm), 0);
    let text = stdout(&mm);
    assert!(text.contains("4x4x4x256"), "missing structural-branch end:\n{text}");
    assert!(text.contains("1024"), "missing fusion width:\n{text}");

    // The tail of stdout is a machine-readable copy of the same trace.
    let json_start = text.find("\n[").expect("JSON array follows the table");
    let trace: Value = serde_json::from_str(&text[json_start..]).expect("valid JSON");
    let names: Vec<&str> = trace
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"fusion"));
    assert!(names.contains(&"mri.block4.bn"));
}

#[test]
fn shape_trace_rejects_bad_kind_and_bad_mri_res() {
    let bad_kind = vox4d(&["shape-trace", "sm-foo"]);
    assert_eq!(exit_code(&bad_kind), 2);
    assert!(stderr(&bad_kind).contains("sm-foo"));

    let bad_res = vox4d(&["shape-trace", "mm-gru", "--mri", "48"]);
    assert_eq!(exit_code(&bad_res), 2);
    assert!(stderr(&bad_res).contains("48"));
}

// ───────────────────────────── gradcheck ─────────────────────────────

#[test]
fn gradcheck_passes_and_repeats_bitwise() {
    let a = vox4d(&["gradcheck", "sm-gru", "--seed", "7"]);
    assert_eq!(exit_code(&a), 0, "stderr: {}", stderr(&a));
    let table = stdout(&a);
    assert!(table.contains("PASS"));
    assert!(!table.contains("FAIL"));
    assert!(table.contains("block1.conv.kernel"));
    assert!(table.contains("gru.W_c"));

    let b = vox4d(&["gradcheck", "sm-gru", "--seed", "7"]);
    assert_eq!(stdout(&b), table, "same seed must print the same table");
}

#[test]
fn gradcheck_fault_injection_exits_5_naming_conv() {
    let out = vox4d(&["gradcheck", "sm-gru", "--seed", "7", "--inject-fault", "conv"]);
    assert_eq!(exit_code(&out), 5);
    assert!(
        stderr(&out).contains("conv"),
        "worst layer must be named: {}",
        stderr(&out)
    );
    assert!(stdout(&out).contains("FAIL"));
}

// ───────────────────────────── train ─────────────────────────────

#[test]
fn train_writes_artifacts_and_reports_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &toy_config(&out_dir, |_| {}));

    let out = vox4d(&["train", "--config", &cfg]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    // stdout is the run summary as JSON.
    let summary: Value = serde_json::from_str(&stdout(&out)).expect("summary JSON");
    assert_eq!(summary["model"], "sm-gru");
    assert_eq!(summary["completed_repeats"], 1);
    assert_eq!(summary["lr"], 0.001);

    // One metrics row per epoch per repeat, plus the header.
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(csv.starts_with("run_id,epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s"));

    assert!(out_dir.join("summary.json").is_file());
    assert!(out_dir.join("checkpoint_best").join("model.json").is_file());
    assert!(out_dir.join("checkpoint_best").join("model.bin").is_file());

    // Per-epoch progress goes to stderr, not stdout.
    assert!(stderr(&out).contains("[r1] epoch"));
}

#[test]
fn train_rejects_unknown_config_key_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(&dir.path().join("run"), |_| {});
    cfg["data"]["phanton"] = cfg["data"]["phantom"].take();
    cfg["data"].as_object_mut().unwrap().remove("phantom");
    let path = write_config(dir.path(), &cfg);

    let out = vox4d(&["train", "--config", &path]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("phanton"), "stderr: {}", stderr(&out));
}

#[test]
fn train_missing_labels_csv_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let volumes = dir.path().join("volumes");
    fs::create_dir(&volumes).unwrap();
    let csv = dir.path().join("labels.csv");
    let cfg = toy_config(&dir.path().join("run"), |c| {
        c["data"] = json!({ "nifti_dir": volumes, "labels_csv": csv });
    });
    let path = write_config(dir.path(), &cfg);

    let out = vox4d(&["train", "--config", &path]);
    assert_eq!(exit_code(&out), 3);
    assert!(
        stderr(&out).contains("labels.csv"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn train_rejects_bad_source_combinations() {
    let dir = tempfile::tempdir().unwrap();

    // Both sources at once.
    let both = toy_config(&dir.path().join("run"), |c| {
        c["data"]["nifti_dir"] = json!("/tmp");
        c["data"]["labels_csv"] = json!("/tmp/labels.csv");
    });
    let out = vox4d(&["train", "--config", &write_config(dir.path(), &both)]);
    assert_eq!(exit_code(&out), 2);

    // No source at all.
    let none = toy_config(&dir.path().join("run"), |c| {
        c["data"] = json!({});
    });
    let out = vox4d(&["train", "--config", &write_config(dir.path(), &none)]);
    assert_eq!(exit_code(&out), 2);

    // Multi-modal networks cannot feed from a bare volume directory.
    let multi = toy_config(&dir.path().join("run"), |c| {
        c["model"]["modality"] = json!("multi");
        c["model"]["mri_input"] = json!([6, 6, 6, 1]);
        c["model"]["mri_filters"] = json!([4, 8, 16, 16]);
        c["data"] = json!({ "nifti_dir": "/tmp", "labels_csv": "/tmp/labels.csv" });
    });
    let out = vox4d(&["train", "--config", &write_config(dir.path(), &multi)]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("phantom"), "stderr: {}", stderr(&out));
}

#[test]
fn train_with_all_repeats_aborting_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd learning rate pushes the f32 weights to infinity after the
    // first step; the next batch goes non-finite and the repeat aborts.
    let cfg = toy_config(&dir.path().join("run"), |c| {
        c["train"]["lr"] = json!(1e40);
        c["train"]["batch_size"] = json!(1);
    });
    let path = write_config(dir.path(), &cfg);

    let out = vox4d(&["train", "--config", &path]);
    assert_eq!(exit_code(&out), 4, "stderr: {}", stderr(&out));
    let summary: Value = serde_json::from_str(&stdout(&out)).expect("summary still printed");
    assert_eq!(summary["completed_repeats"], 0);
    assert_eq!(summary["aborted"].as_array().unwrap().len(), 1);
}

#[test]
fn train_single_threaded_runs_reproduce_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_a = write_config(&dir.path().join("."), &toy_config(&out_a, |_| {}));
    let run_a = vox4d(&["train", "--config", &cfg_a, "--threads", "1"]);
    assert_eq!(exit_code(&run_a), 0, "stderr: {}", stderr(&run_a));

    let dir_b = tempfile::tempdir().unwrap();
    let cfg_b = write_config(dir_b.path(), &toy_config(&out_b, |_| {}));
    let run_b = vox4d(&["train", "--config", &cfg_b, "--threads", "1"]);
    assert_eq!(exit_code(&run_b), 0, "stderr: {}", stderr(&run_b));

    assert_eq!(stdout(&run_a), stdout(&run_b), "summaries must match bitwise");
    for file in ["metrics.csv", "summary.json"] {
        assert_eq!(
            fs::read(out_a.join(file)).unwrap(),
            fs::read(out_b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }
    for file in ["model.json", "model.bin"] {
        assert_eq!(
            fs::read(out_a.join("checkpoint_best").join(file)).unwrap(),
            fs::read(out_b.join("checkpoint_best").join(file)).unwrap(),
            "checkpoint {file} differs between identical runs"
        );
    }
}

#[test]
fn train_honors_output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let ignored = dir.path().join("ignored");
    let overridden = dir.path().join("from-env");
    let cfg = write_config(dir.path(), &toy_config(&ignored, |_| {}));

    let out = Command::new(env!("CARGO_BIN_EXE_vox4d"))
        .args(["train", "--config", &cfg])
        .env("VOX4D_OUTPUT_DIR", &overridden)
        .output()
        .expect("binary spawns");
    assert_eq!(out.status.code(), Some(0));
    assert!(overridden.join("metrics.csv").is_file());
    assert!(!ignored.exists(), "configured dir must be left untouched");
}

// ───────────────────────────── evaluate ─────────────────────────────

#[test]
fn evaluate_scores_a_checkpoint_on_each_split() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), &toy_config(&out_dir, |_| {}));
    let trained = vox4d(&["train", "--config", &cfg]);
    assert_eq!(exit_code(&trained), 0, "stderr: {}", stderr(&trained));
    let checkpoint = out_dir.join("checkpoint_best");
    let ckpt = checkpoint.to_str().unwrap();

    // Stratified split of 6 at ratio 0.5: round(0.5 * 3) = 2 of each class
    // train, so 4 train / 2 val.
    for (split, samples) in [("val", 2), ("train", 4), ("all", 6)] {
        let out = vox4d(&["evaluate", "--config", &cfg, "--checkpoint", ckpt, "--split", split]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        let report: Value = serde_json::from_str(&stdout(&out)).expect("report JSON");
        assert_eq!(report["model"], "sm-gru");
        assert_eq!(report["split"], split);
        assert_eq!(report["samples"], samples);
        let acc = report["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(report["loss"].as_f64().unwrap().is_finite());
    }

    // The checkpointed accuracy must be reproduced exactly on the split it
    // was selected on.
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let out = vox4d(&["evaluate", "--config", &cfg, "--checkpoint", ckpt, "--split", "val"]);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["accuracy"], summary["best"]["val_acc"]);
}

#[test]
fn evaluate_missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &toy_config(&dir.path().join("run"), |_| {}));
    let out = vox4d(&["evaluate", "--config", &cfg, "--checkpoint", "/nonexistent/ckpt"]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("checkpoint"));
}

// ───────────────────────────── generate ─────────────────────────────

#[test]
fn generate_writes_balanced_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let run = |out: &Path| {
        let o = vox4d(&["generate", "--count", "4", "--delta", "0", "--seed", "9", "--out",
            out.to_str().unwrap()]);
        assert_eq!(exit_code(&o), 0, "stderr: {}", stderr(&o));
    };
    run(&out_a);
    run(&out_b);

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 4);
    assert_eq!(manifest["null_signal"], true, "delta 0 is the null control");
    let labels: Vec<u64> = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["label"].as_u64().unwrap())
        .collect();
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 2);
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 2);

    // Same seed, byte-identical dataset.
    let mut names: Vec<String> = fs::read_dir(&out_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 4 + 1, "two dumps per sample plus manifest");
    for name in &names {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical generate runs"
        );
    }
}

#[test]
fn generate_rejects_bad_flags_and_unwritable_destination() {
    let zero = vox4d(&["generate", "--count", "0", "--out", "/tmp/x"]);
    assert_eq!(exit_code(&zero), 2);

    let bad_delta = vox4d(&["generate", "--count", "2", "--delta", "1.5", "--out", "/tmp/x"]);
    assert_eq!(exit_code(&bad_delta), 2);

    // A path through a regular file can never become a directory.
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let out = vox4d(&["generate", "--count", "2", "--out", target.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
}
