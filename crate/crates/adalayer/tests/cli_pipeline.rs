//! End-to-end checks of the command-line pipeline through the real binary:
//! the full generate/train/perturb/calibrate/eval/report walkthrough, the
//! stdout run-manifest contract, input immutability, idempotent reruns,
//! usage errors (exit 1), and numerical aborts (exit 2).

use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;

use adalayer::fileio::sha256_file;

/// Mirror of the driver's evaluation flip-stream derivation, asserted against
/// the manifest it prints.
const EVAL_FLIP_SEED_XOR: u64 = 0x666c_6970;

const TASK_SEED: u64 = 11;
const TRAIN_SEED: u64 = 3;

fn task_json() -> String {
    format!(
        r#"{{
  "format_version": 1,
  "task": {{
    "embed_dim": 8,
    "num_classes": 4,
    "depth_levels": [1, 2],
    "tokens_per_sample": 4,
    "num_samples": 1100,
    "noise_std": 0.3,
    "seed": {TASK_SEED}
  }}
}}"#
    )
}

fn run_json() -> String {
    format!(
        r#"{{
  "format_version": 1,
  "model": {{
    "num_layers": 3,
    "embed_dim": 8,
    "block_hidden": 24,
    "router_hidden": 6,
    "num_classes": 4
  }},
  "train": {{
    "epochs": 2,
    "batch_size": 16,
    "learning_rate": 0.002,
    "seed": {TRAIN_SEED}
  }}
}}"#
    )
}

/// A generated dataset and trained checkpoint shared (read-only) by every
/// test in this file.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

static WORKSPACE: OnceLock<Workspace> = OnceLock::new();

fn workspace() -> &'static Workspace {
    WORKSPACE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        std::fs::write(dir.path().join("task.json"), task_json()).expect("write task config");
        std::fs::write(dir.path().join("run.json"), run_json()).expect("write run config");
        let ws = Workspace { dir };
        expect_success(&ws, &["gen-data", "--config", "task.json", "--out", "data.json"]);
        expect_success(
            &ws,
            &[
                "train",
                "--data",
                "data.json",
                "--config",
                "run.json",
                "--out",
                "ckpt.json",
                "--log",
                "train_log.jsonl",
            ],
        );
        ws
    })
}

fn run(ws: &Workspace, args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_adalayer"))
        .current_dir(ws.dir.path())
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_success(ws: &Workspace, args: &[&str]) -> Output {
    let output = run(ws, args);
    assert!(
        output.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn expect_exit_code(ws: &Workspace, args: &[&str], code: i32) -> String {
    let output = run(ws, args);
    assert_eq!(
        output.status.code(),
        Some(code),
        "command {args:?}: expected exit {code}, stderr:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Parses the final stdout line as the run manifest and checks its fixed
/// fields: the command name, one sha256 per input, and the output listing.
fn manifest(output: &Output, command: &str, outputs: &[&str]) -> serde_json::Value {
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .next_back()
        .unwrap_or_else(|| panic!("no stdout manifest for {command}"));
    let value: serde_json::Value =
        serde_json::from_str(line).expect("final stdout line is a JSON manifest");
    assert_eq!(value["format_version"], 1);
    assert_eq!(value["command"], command);
    let inputs = value["inputs"].as_array().expect("manifest inputs");
    for input in inputs {
        let digest = input["sha256"].as_str().expect("input digest");
        assert_eq!(digest.len(), 64, "sha256 hex length");
        assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    }
    let listed: Vec<&str> = value["outputs"]
        .as_array()
        .expect("manifest outputs")
        .iter()
        .map(|o| o.as_str().expect("output path"))
        .collect();
    for expected in outputs {
        assert!(
            listed.contains(expected),
            "manifest for {command} should list {expected}, got {listed:?}"
        );
    }
    value
}

fn read_json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("read artifact"))
        .expect("artifact parses as JSON")
}

#[test]
fn walkthrough_perturb_calibrate_eval_report() {
    let ws = workspace();
    let data_hash = sha256_file(&ws.path("data.json")).unwrap();
    let ckpt_hash = sha256_file(&ws.path("ckpt.json")).unwrap();

    // Uniform 4-bit quantization.
    let out = expect_success(
        ws,
        &[
            "quantize",
            "--ckpt",
            "ckpt.json",
            "--bits",
            "4",
            "--group-size",
            "128",
            "--out",
            "q4.json",
            "--manifest",
            "q4_manifest.json",
        ],
    );
    let m = manifest(&out, "quantize", &["q4.json", "q4_manifest.json"]);
    assert!(m["seed"].is_null(), "quantize has no governing seed");
    let qm = read_json_file(&ws.path("q4_manifest.json"));
    let tensors = qm["tensors"].as_array().expect("per-tensor stats");
    assert_eq!(tensors.len(), 6, "two block matrices per layer, three layers");

    // Mixed schedule: full width, skip, and 3-bit across the three layers.
    // The schedule stands alone; no uniform --bits is required beside it.
    std::fs::write(
        ws.path("mixed.json"),
        r#"{"format_version":1,"per_layer_bits":[4,16,3]}"#,
    )
    .unwrap();
    expect_success(
        ws,
        &[
            "quantize",
            "--ckpt",
            "ckpt.json",
            "--mixed",
            "mixed.json",
            "--out",
            "qmix.json",
            "--manifest",
            "qmix_manifest.json",
        ],
    );
    let mix = read_json_file(&ws.path("qmix_manifest.json"));
    let bits: Vec<u64> = mix["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["bits"].as_u64().unwrap())
        .collect();
    assert_eq!(bits, vec![4, 4, 3, 3], "skipped layers leave no tensor entry");

    // Pruning composes with evaluation.
    expect_success(
        ws,
        &["prune", "--ckpt", "ckpt.json", "--sparsity", "0.5", "--out", "pruned.json"],
    );
    expect_success(
        ws,
        &[
            "eval",
            "--ckpt",
            "pruned.json",
            "--data",
            "data.json",
            "--report",
            "metrics_pruned.json",
        ],
    );

    // Calibrate the quantized model and evaluate at the selected threshold
    // and at the default.
    expect_success(
        ws,
        &["calibrate", "--ckpt", "q4.json", "--data", "data.json", "--out", "calibration.json"],
    );
    let calib = read_json_file(&ws.path("calibration.json"));
    let theta = calib["selected_theta"].as_f64().expect("selected_theta");
    assert!(theta > 0.0 && theta <= 0.5);

    let out = expect_success(
        ws,
        &[
            "eval",
            "--ckpt",
            "q4.json",
            "--data",
            "data.json",
            "--theta",
            &theta.to_string(),
            "--report",
            "metrics_calibrated.json",
        ],
    );
    let m = manifest(&out, "eval", &["metrics_calibrated.json"]);
    assert_eq!(
        m["seed"].as_u64(),
        Some(TASK_SEED ^ EVAL_FLIP_SEED_XOR),
        "eval's flip stream derives from the dataset seed"
    );
    expect_success(
        ws,
        &[
            "eval",
            "--ckpt",
            "q4.json",
            "--data",
            "data.json",
            "--report",
            "metrics_default.json",
        ],
    );
    let calibrated = read_json_file(&ws.path("metrics_calibrated.json"));
    let default = read_json_file(&ws.path("metrics_default.json"));
    assert_eq!(default["theta"].as_f64(), Some(0.5));
    assert!(
        calibrated["accuracy"].as_f64().unwrap() >= default["accuracy"].as_f64().unwrap(),
        "calibrated threshold should not lose test accuracy here: {} vs {}",
        calibrated["accuracy"],
        default["accuracy"]
    );

    // Figure export consumes every artifact kind.
    expect_success(
        ws,
        &[
            "report",
            "--inputs",
            "train_log.jsonl",
            "metrics_calibrated.json",
            "metrics_default.json",
            "calibration.json",
            "--out-dir",
            "csv",
        ],
    );
    for name in [
        "layer_exec_ratio.csv",
        "logit_gap_histogram.csv",
        "efficiency.csv",
        "training_curves.csv",
        "threshold_sweep.csv",
    ] {
        let text = std::fs::read_to_string(ws.path("csv").join(name)).expect("csv exists");
        assert!(text.lines().count() >= 2, "{name} should have data rows");
    }
    let eff = std::fs::read_to_string(ws.path("csv").join("efficiency.csv")).unwrap();
    assert_eq!(eff.lines().count(), 3, "one efficiency row per metrics report");
    let sweep = std::fs::read_to_string(ws.path("csv").join("threshold_sweep.csv")).unwrap();
    assert_eq!(
        sweep.lines().count(),
        1 + calib["candidates"].as_array().unwrap().len(),
        "one sweep row per calibration candidate"
    );

    // No command mutated its inputs.
    assert_eq!(sha256_file(&ws.path("data.json")).unwrap(), data_hash);
    assert_eq!(sha256_file(&ws.path("ckpt.json")).unwrap(), ckpt_hash);

    // Idempotency: identical invocations rewrite identical bytes.
    let q4_bytes = std::fs::read(ws.path("q4.json")).unwrap();
    let metrics_bytes = std::fs::read(ws.path("metrics_default.json")).unwrap();
    expect_success(
        ws,
        &[
            "quantize",
            "--ckpt",
            "ckpt.json",
            "--bits",
            "4",
            "--group-size",
            "128",
            "--out",
            "q4.json",
            "--manifest",
            "q4_manifest.json",
        ],
    );
    expect_success(
        ws,
        &[
            "eval",
            "--ckpt",
            "q4.json",
            "--data",
            "data.json",
            "--report",
            "metrics_default.json",
        ],
    );
    assert_eq!(std::fs::read(ws.path("q4.json")).unwrap(), q4_bytes);
    assert_eq!(std::fs::read(ws.path("metrics_default.json")).unwrap(), metrics_bytes);
}

#[test]
fn generation_and_training_emit_seeded_manifests() {
    let ws = workspace();
    // Regenerate into fresh paths to inspect the manifests without touching
    // the shared artifacts.
    let out = expect_success(
        ws,
        &["gen-data", "--config", "task.json", "--out", "data_again.json"],
    );
    let m = manifest(&out, "gen-data", &["data_again.json"]);
    assert_eq!(m["seed"].as_u64(), Some(TASK_SEED));
    assert_eq!(
        sha256_file(&ws.path("data_again.json")).unwrap(),
        sha256_file(&ws.path("data.json")).unwrap(),
        "same config, same dataset bytes"
    );

    let out = expect_success(
        ws,
        &[
            "train",
            "--data",
            "data.json",
            "--config",
            "run.json",
            "--out",
            "ckpt_again.json",
            "--log",
            "log_again.jsonl",
        ],
    );
    let m = manifest(&out, "train", &["ckpt_again.json", "log_again.jsonl"]);
    assert_eq!(m["seed"].as_u64(), Some(TRAIN_SEED));
    assert_eq!(
        sha256_file(&ws.path("ckpt_again.json")).unwrap(),
        sha256_file(&ws.path("ckpt.json")).unwrap(),
        "same seed, same checkpoint bytes"
    );
}

#[test]
fn usage_and_artifact_errors_exit_one() {
    let ws = workspace();

    let stderr = expect_exit_code(
        ws,
        &["gen-data", "--config", "no_such_file.json", "--out", "x.json"],
        1,
    );
    assert!(stderr.contains("no_such_file.json"), "stderr: {stderr}");

    std::fs::write(
        ws.path("task_v2.json"),
        task_json().replace("\"format_version\": 1", "\"format_version\": 2"),
    )
    .unwrap();
    let stderr = expect_exit_code(
        ws,
        &["gen-data", "--config", "task_v2.json", "--out", "x.json"],
        1,
    );
    assert!(stderr.contains("format_version"), "stderr: {stderr}");

    std::fs::write(
        ws.path("task_typo.json"),
        task_json().replace("\"noise_std\"", "\"noise_level\""),
    )
    .unwrap();
    let stderr = expect_exit_code(
        ws,
        &["gen-data", "--config", "task_typo.json", "--out", "x.json"],
        1,
    );
    assert!(stderr.contains("noise_level"), "stderr: {stderr}");

    let stderr = expect_exit_code(
        ws,
        &[
            "eval",
            "--ckpt",
            "ckpt.json",
            "--data",
            "data.json",
            "--theta",
            "1.5",
            "--report",
            "x.json",
        ],
        1,
    );
    assert!(stderr.contains("theta"), "stderr: {stderr}");

    // Unsupported bit width is rejected at argument parsing.
    expect_exit_code(
        ws,
        &[
            "quantize",
            "--ckpt",
            "ckpt.json",
            "--bits",
            "5",
            "--out",
            "x.json",
            "--manifest",
            "y.json",
        ],
        1,
    );

    // A report input that is neither a log, metrics, nor calibration.
    let stderr = expect_exit_code(
        ws,
        &["report", "--inputs", "task.json", "--out-dir", "csv_err"],
        1,
    );
    assert!(stderr.contains("training log"), "stderr: {stderr}");
}

#[test]
fn mismatched_checkpoint_and_dataset_exit_one() {
    let ws = workspace();
    std::fs::write(
        ws.path("task_wide.json"),
        task_json().replace("\"embed_dim\": 8", "\"embed_dim\": 6"),
    )
    .unwrap();
    expect_success(
        ws,
        &["gen-data", "--config", "task_wide.json", "--out", "data_wide.json"],
    );
    let stderr = expect_exit_code(
        ws,
        &[
            "eval",
            "--ckpt",
            "ckpt.json",
            "--data",
            "data_wide.json",
            "--report",
            "x.json",
        ],
        1,
    );
    assert!(stderr.contains("dims"), "stderr: {stderr}");
}

#[test]
fn divergent_training_exits_two_and_saves_the_rollback_checkpoint() {
    let ws = workspace();
    std::fs::write(
        ws.path("run_hot.json"),
        run_json().replace("\"learning_rate\": 0.002", "\"learning_rate\": 1e39"),
    )
    .unwrap();
    let output = run(
        ws,
        &[
            "train",
            "--data",
            "data.json",
            "--config",
            "run_hot.json",
            "--out",
            "ckpt_hot.json",
            "--log",
            "log_hot.jsonl",
        ],
    );
    assert_eq!(
        output.status.code(),
        Some(2),
        "numerical failure must exit 2, stderr:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");

    // The checkpoint still landed, holds parseable JSON, and the manifest was
    // still printed; the log records the divergence event.
    manifest(&output, "train", &["ckpt_hot.json", "log_hot.jsonl"]);
    let ckpt = read_json_file(&ws.path("ckpt_hot.json"));
    assert_eq!(ckpt["format_version"], 1);
    let log = std::fs::read_to_string(ws.path("log_hot.jsonl")).unwrap();
    assert!(log.contains("\"kind\":\"divergence\""), "log: {log}");

    // The rolled-back checkpoint is still usable downstream.
    expect_success(
        ws,
        &[
            "eval",
            "--ckpt",
            "ckpt_hot.json",
            "--data",
            "data.json",
            "--report",
            "metrics_hot.json",
        ],
    );
}

#[test]
fn help_exits_zero_and_documents_the_subcommands() {
    let ws = workspace();
    let output = run(ws, &["--help"]);
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8_lossy(&output.stdout);
    for sub in ["gen-data", "train", "quantize", "prune", "calibrate", "eval", "report"] {
        assert!(text.contains(sub), "--help should list {sub}");
    }
    let output = run(ws, &["quantize", "--help"]);
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8_lossy(&output.stdout);
    for flag in ["--ckpt", "--bits", "--group-size", "--mixed", "--out", "--manifest"] {
        assert!(text.contains(flag), "quantize --help should list {flag}");
    }
}
