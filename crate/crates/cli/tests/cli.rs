//! End-to-end tests of the pipeline binary: exit codes, dependency
//! ordering, idempotent reruns and a small full-pipeline run.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regconsist"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "version": 1,
        "dataset": {
            "seed": 5,
            "objects": 2,
            "room": [3.0, 3.0, 2.5],
            "image_size": 32,
            "grid_step": 1.0,
            "yaw_step_deg": 180
        },
        "regions": {"min_size": 16},
        "sampling": {"pairs_per_batch": 128, "crop_size": 32},
        "ssl": {
            "total_iters": 10,
            "warmup_iters": 2,
            "view_pairs_per_step": 2,
            "channels": [4, 6, 8],
            "embed_dim": 8
        },
        "supervise": {"iters": 30, "fraction": 0.2, "batch_pixels": 64}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run(workdir: &Path, config: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--workdir")
        .arg(workdir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn eval_before_finetune_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&dir.path().join("wd"), &config, &["eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dependency"));
}

#[test]
fn pair_select_without_dataset_names_genworld() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&dir.path().join("wd"), &config, &["pair-select"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("genworld"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"version": 1, "frobnicate": true}"#).unwrap();
    let out = run(&dir.path().join("wd"), &config, &["genworld"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_band_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let wd = dir.path().join("wd");
    assert!(run(&wd, &config, &["genworld"]).status.success());
    let out = run(&wd, &config, &["pair-select", "--iou-low", "0.9", "--iou-high", "0.3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_emits_a_report_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let wd = dir.path().join("wd");

    let first = run(&wd, &config, &["run-all"]);
    assert!(first.status.success(), "stderr: {}", String::from_utf8_lossy(&first.stderr));

    let report_path = wd.join("eval").join("report.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["miou_present"].is_number());
    assert!(report["confusion_matrix"].is_array());
    assert!(!report["evaluated_frames"].as_array().unwrap().is_empty());

    // Rerun: every stage reports up to date and output hashes are stable.
    let before: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(wd.join("eval/provenance.json")).unwrap(),
    )
    .unwrap();
    let second = run(&wd, &config, &["run-all"]);
    assert!(second.status.success());
    let text = stdout(&second);
    assert_eq!(text.matches("up to date").count(), 8, "stdout: {text}");
    let after: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(wd.join("eval/provenance.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(before["output_hashes"], after["output_hashes"]);

    // Config change invalidates only downstream work.
    let out = run(&wd, &config, &["finetune", "--fraction", "0.5"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("finetune: done"));
}

#[test]
fn random_init_finetune_skips_pretrain() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let wd = dir.path().join("wd");
    assert!(run(&wd, &config, &["genworld"]).status.success());
    let out = run(&wd, &config, &["finetune", "--init", "random"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(wd.join("finetune/model.rcck").exists());
}

#[test]
fn genworld_out_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("dataset");
    let out = run(&dir.path().join("wd"), &config, &["genworld", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out_dir.join("manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(!manifest["frames"].as_array().unwrap().is_empty());
}

#[test]
fn fraction_ablation_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let wd = dir.path().join("wd");
    let out = run(
        &wd,
        &config,
        &["ablate", "--axis", "fraction", "--values", "0.2,0.5", "--seeds", "1"],
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(wd.join("ablate/fraction.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "value,seed0,mean");
    assert!(lines[1].starts_with("0.2,"));
    assert!(lines[2].starts_with("0.5,"));
}

#[test]
fn unknown_ablation_axis_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&dir.path().join("wd"), &config, &["ablate", "--axis", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}
