use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 5,
  "scene": {"num_points": 800, "objects_min": 5, "objects_max": 5},
  "detector": {"distractors": false},
  "model": {"d_model": 16, "heads": 2, "layers": 1},
  "train": {"stage1_epochs": 1, "stage2_epochs": 0, "scst_epochs": 0, "batch_size": 4}
}"#;

fn cli(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contextcap"));
    cmd.args(args).env_remove("CONTEXTCAP_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn contextcap")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Generates a 2-scene dataset and trains one tiny epoch on it.
fn trained(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let o = cli(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--n-scenes", "2", "--seed", "3"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = root.join("run");
    let o = cli(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data, run.join("final.ckpt"))
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(cli(&["gen-data"], &[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = cli(&["gen-data", "--out", s(&out), "--set", "scene.no_such_key=1"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scene.no_such_key"));
    let o = cli(&["verify", "--inject-fault", "softmax"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("layer_norm"));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = cli(&["eval", "--ckpt", s(&missing), "--data", s(&missing)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn gen_data_writes_manifest_and_logs_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = cli(&["gen-data", "--out", s(&out), "--n-scenes", "3", "--set", "scene.objects_max=4"], &[("CONTEXTCAP_SEED", "99")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("resolved config"));
    assert!(err.contains("\"objects_max\": 4"));
    assert!(err.contains("\"seed\": 99"));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["n_scenes"], 3);
    for entry in manifest["scenes"].as_array().unwrap() {
        let scene = contextcap::scene::load_scene(&out.join(entry["file"].as_str().unwrap())).unwrap();
        assert_eq!(scene.scene_id, entry["scene_id"].as_str().unwrap());
        assert!(scene.gt_objects.len() <= 4);
    }
}

#[test]
fn train_eval_and_caption_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    for f in ["config.json", "metrics.jsonl", "latest.ckpt", "xe_frozen.ckpt", "final.ckpt"] {
        assert!(ckpt.with_file_name(f).exists(), "{f}");
    }

    let o = cli(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["C@0.5IoU", "B-4@0.5IoU", "M@0.5IoU", "R@0.5IoU", "mAP@0.5IoU"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(report["n_gt_objects"], 10);

    // five objects, no distractors: one caption each
    let scene = data.join("scene_300000.json");
    let o = cli(&["caption", "--ckpt", s(&ckpt), "--scene", s(&scene)], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let captions: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(captions["captions"].as_array().unwrap().len(), 5);
}

#[test]
fn checkpoint_version_mismatch_names_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = 9;
    let bad = dir.path().join("future.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = cli(&["caption", "--ckpt", s(&bad), "--scene", s(&data.join("scene_300000.json"))], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("version 9") && err.contains(&format!("version {}", contextcap::autodiff::CHECKPOINT_VERSION)), "{err}");
}

#[test]
fn injected_fault_fails_verify_with_exit_three() {
    let o = cli(&["verify", "--inject-fault", "layer_norm"], &[]);
    assert_eq!(o.status.code(), Some(3));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["passed"], false);
    assert_eq!(summary["injected_fault"], "layer_norm");
    assert!(stderr(&o).contains("failed: gradient/op:layer_norm"), "{}", stderr(&o));
}
