use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use q4dg::pipeline::predict::Prediction;
use q4dg::pipeline::TrainConfig;
use q4dg::scenes::{read_dataset, SceneConfig};

fn q4dg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_q4dg"))
        .args(args)
        .env("Q4DG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = q4dg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small scene and model so the end-to-end chain runs in seconds.
fn tiny_setup(root: &Path) {
    let scene = SceneConfig {
        times: 3,
        height: 16,
        width: 16,
        queries_per_view: 4,
        ..SceneConfig::default()
    };
    fs::write(root.join("scene.json"), serde_json::to_string(&scene).unwrap()).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.fusion.dim = 16;
    cfg.model.fusion.layers = 1;
    cfg.model.fusion.heads = 2;
    cfg.model.decoder_channels = [8, 8, 8];
    cfg.model.track_dim = 4;
    fs::write(root.join("train.json"), cfg.to_json()).unwrap();
}

#[test]
fn every_flag_is_documented_in_help() {
    let mut root = q4dg_cli::command();
    root.build();
    let mut undocumented = Vec::new();
    for sub in root.get_subcommands().filter(|s| s.get_name() != "help") {
        assert!(sub.get_about().is_some(), "{} lacks a description", sub.get_name());
        let help = q4dg(&[sub.get_name(), "--help"]);
        assert!(help.status.success());
        let text = String::from_utf8(help.stdout).unwrap();
        for arg in sub.get_arguments() {
            let Some(long) = arg.get_long() else { continue };
            if long == "help" {
                continue;
            }
            let documented = arg.get_help().is_some_and(|h| !h.to_string().trim().is_empty());
            if !documented || !text.contains(&format!("--{long}")) {
                undocumented.push(format!("{} --{long}", sub.get_name()));
            }
        }
    }
    assert!(undocumented.is_empty(), "undocumented flags: {undocumented:?}");
}

#[test]
fn exit_codes_and_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = q4dg(&["gen-data", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("q4dg: usage:"));

    assert_eq!(q4dg(&["train", "--bogus"]).status.code(), Some(1));

    let missing = dir.path().join("none.ckpt");
    let out = q4dg(&["infer", "--ckpt", p(&missing), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("q4dg: runtime:"));
}

#[test]
fn dump_single_token_mask() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.txt");
    ok(&[
        "dump-masks", "--views", "1", "--times", "1", "--patches", "1", "--window", "1", "--setting",
        "mono-s", "--kind", "spatial", "--out", p(&file),
    ]);
    assert_eq!(fs::read_to_string(&file).unwrap(), "1 1 1 1 mono-s spatial\n1\n");
}

#[test]
fn zero_step_training_keeps_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_setup(root);
    let data = root.join("data");
    let ckpt = root.join("run/model.ckpt");
    ok(&["gen-data", "--config", p(&root.join("scene.json")), "--out", p(&data), "--seed", "3"]);
    ok(&[
        "train", "--data", p(&data), "--config", p(&root.join("train.json")), "--ckpt", p(&ckpt),
        "--seed", "1", "--steps", "1", "--task", "depth",
    ]);
    let before = fs::read(&ckpt).unwrap();
    ok(&["train", "--data", p(&data), "--ckpt", p(&ckpt), "--seed", "1", "--steps", "0"]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    ok(&["train", "--data", p(&data), "--ckpt", p(&ckpt), "--seed", "1", "--steps", "0", "--stage", "2"]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let log = fs::read_to_string(root.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("stage,task,step,cam,depth,mask,point,track,total,lr"));
    assert_eq!(log.lines().count(), 2);
    assert!(root.join("run/resolved_config.json").is_file());
}

#[test]
fn stage_two_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_setup(root);
    let data = root.join("data");
    ok(&["gen-data", "--config", p(&root.join("scene.json")), "--out", p(&data), "--seed", "3"]);
    let out = q4dg(&[
        "train", "--data", p(&data), "--ckpt", p(&root.join("x.ckpt")), "--seed", "1", "--stage", "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn perfect_predictions_evaluate_to_ideal_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_setup(root);
    let data = root.join("data");
    ok(&[
        "gen-data", "--config", p(&root.join("scene.json")), "--out", p(&data), "--seed", "8", "--count", "2",
    ]);
    let preds = root.join("preds");
    for name in ["scene_000", "scene_001"] {
        let seq = read_dataset(&data.join(name)).unwrap();
        Prediction::from_ground_truth(&seq).write(&preds.join(name)).unwrap();
    }
    let csv = root.join("metrics.csv");
    ok(&["eval", "--pred", p(&preds), "--data", p(&data), "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let value = |scene: &str, metric: &str| -> f64 {
        text.lines()
            .find_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == scene && f[1] == metric).then(|| f[2].parse().unwrap())
            })
            .unwrap_or_else(|| panic!("{scene}/{metric} missing"))
    };
    for scene in ["scene_000", "scene_001"] {
        assert!(value(scene, "ate").abs() < 1e-9);
        assert!(value(scene, "abs_rel").abs() < 1e-9);
        assert_eq!(value(scene, "j_m"), 1.0);
    }
    assert!(root.join("resolved_config.json").is_file());
}

#[test]
fn infer_then_eval_matches_direct_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_setup(root);
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    ok(&["gen-data", "--config", p(&root.join("scene.json")), "--out", p(&data), "--seed", "4"]);
    ok(&[
        "train", "--data", p(&data), "--config", p(&root.join("train.json")), "--ckpt", p(&ckpt),
        "--seed", "2", "--steps", "1", "--task", "pose",
    ]);
    let preds = root.join("preds");
    ok(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&preds)]);
    assert!(preds.join("scene_000/tracks.csv").is_file());
    let (a, b) = (root.join("a.csv"), root.join("b.csv"));
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&a)]);
    ok(&["eval", "--pred", p(&preds), "--data", p(&data), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
