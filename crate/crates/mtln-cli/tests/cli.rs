//! End-to-end tests of the `mtln` binary: help coverage, the full
//! pipeline on a small dataset, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mtln");

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "mtln {:?} failed\nstdout: {}\nstderr: {}",
        args.iter().map(|s| s.as_ref().to_owned()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small, fast configuration: 32x32 network, two stages, two epochs.
const TINY_CONFIG: &str = r#"{
  "network": {"input_h": 32, "input_w": 32, "channels": [4, 8], "fc_hidden": [8]},
  "train": {"epochs": 2, "learning_rate": 0.005},
  "loss": {"omega0": 5.0, "sigma": 3.0},
  "data": {"count": 16}
}"#;

fn setup(dir: &Path, config: &str) -> (String, String) {
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, config).unwrap();
    (
        cfg.to_str().unwrap().to_owned(),
        dir.to_str().unwrap().to_owned(),
    )
}

#[test]
fn help_enumerates_every_flag_with_its_default() {
    let top = run_ok(&["--help"]);
    for sub in ["phantom", "augment", "split", "train", "eval", "infer"] {
        assert!(top.contains(sub), "top help lists {sub}");
    }
    // Every global flag documents its default.
    for (flag, default_hint) in [
        ("--config", "default"),
        ("--seed", "default"),
        ("--out", "[default: .]"),
    ] {
        let line_block = top
            .split("--")
            .find(|s| s.starts_with(flag.trim_start_matches("--")))
            .unwrap_or_else(|| panic!("top help mentions {flag}"));
        assert!(
            line_block.contains(default_hint),
            "{flag} help documents its default: {line_block}"
        );
    }
    let phantom = run_ok(&["phantom", "--help"]);
    assert!(phantom.contains("--count") && phantom.contains("default"));
    let eval = run_ok(&["eval", "--help"]);
    assert!(eval.contains("--split") && eval.contains("[default: test]"));
    let infer = run_ok(&["infer", "--help"]);
    assert!(infer.contains("--images"));
    for sub in ["augment", "split", "train"] {
        let h = run_ok(&[sub, "--help"]);
        for flag in ["--config", "--seed", "--out"] {
            assert!(h.contains(flag), "{sub} help lists global {flag}");
        }
    }
}

#[test]
fn full_pipeline_on_32_phantoms_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY_CONFIG);
    let base = ["--config", cfg.as_str(), "--seed", "11", "--out", out.as_str()];

    let with = |cmd: &[&str]| -> Vec<String> {
        base.iter().chain(cmd).map(|s| s.to_string()).collect()
    };
    run_ok(&with(&["phantom", "--count", "32"]));
    let manifest = dir.path().join("dataset/manifest.csv");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 33);

    run_ok(&with(&["augment"]));
    run_ok(&with(&["split"]));
    run_ok(&with(&["train"]));
    let eval_out = run_ok(&with(&["eval"]));
    assert!(eval_out.contains("dsc:") && eval_out.contains('\u{b1}'));

    let images = dir.path().join("dataset/images");
    run_ok(&with(&["infer", "--images", images.to_str().unwrap()]));

    for artifact in [
        "dataset/manifest.csv",
        "checkpoint.mtln",
        "loss_log.csv",
        "metrics.csv",
        "predictions/predictions.csv",
    ] {
        assert!(dir.path().join(artifact).exists(), "missing {artifact}");
    }
    let loss_log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert_eq!(loss_log.lines().count(), 3, "header + one line per epoch");

    // Metrics cover exactly the test split.
    let manifest_text = std::fs::read_to_string(&manifest).unwrap();
    let test_rows = manifest_text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2) == Some("test"))
        .count();
    let metric_rows = std::fs::read_to_string(dir.path().join("metrics.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(metric_rows, test_rows);

    // One predicted mask per input image.
    let n_images = std::fs::read_dir(&images).unwrap().count();
    let n_masks = std::fs::read_dir(dir.path().join("predictions"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".pgm")
        })
        .count();
    assert_eq!(n_masks, n_images);
}

#[test]
fn phantom_count_zero_writes_a_valid_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY_CONFIG);
    run_ok(&["--config", &cfg, "--out", &out, "phantom", "--count", "0"]);
    let manifest = std::fs::read_to_string(dir.path().join("dataset/manifest.csv")).unwrap();
    assert_eq!(
        manifest,
        "id,filename,split,pixel_size_mm,cx,cy,a,b,theta,lineage\n"
    );
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), r#"{"trainn": {"epochs": 1}}"#);
    let res = run(&["--config", &cfg, "--out", &out, "phantom"]);
    assert_eq!(res.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("trainn"), "names the bad key: {stderr}");
}

#[test]
fn unknown_split_value_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY_CONFIG);
    let res = run(&["--config", &cfg, "--out", &out, "eval", "--split", "nope"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), TINY_CONFIG);
    let res = run(&["--config", &cfg, "--out", &out, "train"]);
    assert_eq!(res.status.code(), Some(1), "no dataset yet");
    let res = run(&["--config", &cfg, "--out", &out, "eval"]);
    assert_eq!(res.status.code(), Some(1), "no checkpoint yet");
}

#[test]
fn divergent_training_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(
        dir.path(),
        r#"{
          "network": {"input_h": 32, "input_w": 32, "channels": [4, 8], "fc_hidden": [8]},
          "train": {"epochs": 5, "learning_rate": 1e9},
          "data": {"count": 10}
        }"#,
    );
    run_ok(&["--config", &cfg, "--seed", "3", "--out", &out, "phantom"]);
    let res = run(&["--config", &cfg, "--seed", "3", "--out", &out, "train"]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
}

#[test]
fn single_task_checkpoint_supports_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(
        dir.path(),
        r#"{
          "network": {"input_h": 32, "input_w": 32, "channels": [4, 8], "fc_hidden": [8]},
          "train": {"epochs": 1, "learning_rate": 0.005, "mode": "single-task"},
          "loss": {"omega0": 5.0, "sigma": 3.0},
          "data": {"count": 12}
        }"#,
    );
    let base = ["--config", cfg.as_str(), "--seed", "2", "--out", out.as_str()];
    let with = |cmd: &[&str]| -> Vec<String> {
        base.iter().chain(cmd).map(|s| s.to_string()).collect()
    };
    run_ok(&with(&["phantom"]));
    run_ok(&with(&["split"]));
    run_ok(&with(&["train"]));
    let eval_out = run_ok(&with(&["eval"]));
    assert!(eval_out.contains("dsc:"));
    assert!(dir.path().join("metrics.csv").exists());
    let images = dir.path().join("dataset/images");
    run_ok(&with(&["infer", "--images", images.to_str().unwrap()]));
    let preds =
        std::fs::read_to_string(dir.path().join("predictions/predictions.csv")).unwrap();
    assert!(preds.lines().count() > 1);
}
