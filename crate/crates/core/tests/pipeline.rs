use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use q4dg::geometry::{CameraParams, Pose, Vec3};
use q4dg::grid::CameraSetting;
use q4dg::losses::LossWeights;
use q4dg::numerics::container::{load_checkpoint, save_checkpoint};
use q4dg::numerics::ParamStore;
use q4dg::pipeline::metrics::{depth_metrics, pose_metrics};
use q4dg::pipeline::predict::{evaluate, predict, EvalOptions, Prediction};
use q4dg::pipeline::train::{train_stage1, train_stage2, StagePlan, Task, TrainLog};
use q4dg::pipeline::{umeyama_align, Model, TrainConfig, GROUPS};
use q4dg::scenes::{generate_scene, SceneConfig, SceneSequence};
use q4dg::Error;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.fusion.dim = 16;
    cfg.model.fusion.layers = 1;
    cfg.model.fusion.heads = 2;
    cfg.model.decoder_channels = [8, 8, 8];
    cfg.model.track_dim = 4;
    cfg.checksum_every = 1;
    cfg
}

fn tiny_scene(setting: CameraSetting, seed: u64) -> SceneSequence {
    let cfg = SceneConfig {
        times: 3,
        height: 16,
        width: 16,
        queries_per_view: 4,
        ..SceneConfig::for_setting(setting)
    };
    generate_scene(&cfg, seed).unwrap()
}

fn snapshot(store: &ParamStore) -> Vec<(&'static str, [u8; 32])> {
    GROUPS.iter().map(|g| (*g, store.group_digest(g))).collect()
}

fn changed(before: &[(&'static str, [u8; 32])], store: &ParamStore) -> Vec<&'static str> {
    before
        .iter()
        .filter(|(g, d)| store.group_digest(g) != *d)
        .map(|(g, _)| *g)
        .collect()
}

#[test]
fn depth_task_touches_only_backbone_decoder_and_depth_head() {
    let cfg = tiny_config();
    let seq = tiny_scene(CameraSetting::MultiStatic, 3);
    let (model, mut store) = Model::init(&cfg.model, 1).unwrap();
    let before = snapshot(&store);
    let mut log = TrainLog::default();
    let plan = StagePlan::stage1(&[Task::Depth], 3, 1.0);
    train_stage1(&model, &mut store, std::slice::from_ref(&seq), &cfg, &plan, &mut log).unwrap();
    assert_eq!(
        changed(&before, &store),
        ["encoder", "cvgf", "ctlf", "head_dense", "head_depth"]
    );
    assert_eq!(log.rows.len(), 3);
    assert!(log.rows.iter().all(|r| r.task == "depth" && r.report.depth.is_some()));
}

#[test]
fn stage_two_leaves_backbone_untouched() {
    let cfg = tiny_config();
    let seq = tiny_scene(CameraSetting::MonoDynamic, 4);
    let (model, mut store) = Model::init(&cfg.model, 2).unwrap();
    let before = snapshot(&store);
    let mut log = TrainLog::default();
    let plan = StagePlan::stage2(2, LossWeights::default());
    train_stage2(&model, &mut store, std::slice::from_ref(&seq), &cfg, &plan, &mut log).unwrap();
    let moved = changed(&before, &store);
    assert!(moved.iter().all(|g| g.starts_with("head_")), "{moved:?}");
    assert!(moved.contains(&"head_cam") && moved.contains(&"head_track"));
}

#[test]
fn zero_steps_and_zero_weights_leave_parameters_bit_identical() {
    let mut cfg = tiny_config();
    cfg.optimizer.weight_decay = 0.0;
    let seq = tiny_scene(CameraSetting::MultiStatic, 5);
    let (model, mut store) = Model::init(&cfg.model, 3).unwrap();
    let before = snapshot(&store);
    let mut log = TrainLog::default();
    let scenes = std::slice::from_ref(&seq);
    train_stage1(&model, &mut store, scenes, &cfg, &StagePlan::stage1(&Task::ORDER, 0, 1.0), &mut log).unwrap();
    train_stage2(&model, &mut store, scenes, &cfg, &StagePlan::stage2(0, LossWeights::default()), &mut log).unwrap();
    assert!(changed(&before, &store).is_empty());
    let silent = LossWeights {
        cam: 0.0,
        depth: 0.0,
        mask: 0.0,
        point: 0.0,
        track: 0.0,
        ..LossWeights::default()
    };
    train_stage2(&model, &mut store, scenes, &cfg, &StagePlan::stage2(3, silent), &mut log).unwrap();
    assert!(changed(&before, &store).is_empty());
    assert_eq!(log.rows.len(), 3);
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let cfg = tiny_config();
    let seq = tiny_scene(CameraSetting::MonoStatic, 6);
    let (model, store) = Model::init(&cfg.model, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&store, &path).unwrap();
    let (model2, store2) = Model::from_store(&cfg.model, &load_checkpoint(&path).unwrap()).unwrap();
    assert!(GROUPS.iter().all(|g| store.group_digest(g) == store2.group_digest(g)));
    let a = predict(&model, &store, &seq).unwrap();
    let b = predict(&model2, &store2, &seq).unwrap();
    assert_eq!(a, b);
    a.check().unwrap();
}

#[test]
fn prediction_files_round_trip() {
    let seq = tiny_scene(CameraSetting::MultiStatic, 7);
    let pred = Prediction::from_ground_truth(&seq);
    let dir = tempfile::tempdir().unwrap();
    pred.write(dir.path()).unwrap();
    assert_eq!(Prediction::read(dir.path()).unwrap(), pred);
}

#[test]
fn newer_config_version_is_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json()).unwrap();
    v["version"] = serde_json::json!(2);
    match TrainConfig::from_json(&v.to_string()) {
        Err(Error::Version { found: 2, expected: 1 }) => {}
        other => panic!("expected version error, got {other:?}"),
    }
    let back = TrainConfig::from_json(&TrainConfig::default().to_json()).unwrap();
    assert_eq!(back, TrainConfig::default());
}

#[test]
fn perfect_predictions_score_identities_in_every_setting() {
    for (k, setting) in [CameraSetting::MonoStatic, CameraSetting::MonoDynamic, CameraSetting::MultiStatic]
        .into_iter()
        .enumerate()
    {
        let seq = tiny_scene(setting, 10 + k as u64);
        let m = evaluate(&Prediction::from_ground_truth(&seq), &seq, &EvalOptions::default()).unwrap();
        let tol = 1e-9;
        assert!(m.pose.ate < tol && m.pose.rte < tol && m.pose.rre < 1e-6, "{:?}", m.pose);
        assert!(m.depth.abs_rel < tol && m.depth.delta == 1.0);
        assert!(m.seg.j_mean == 1.0 && m.seg.j_recall == 1.0);
        assert!(m.points.acc_mean < tol && m.points.comp_mean < tol);
        assert!((m.points.nc_mean - 1.0).abs() < tol);
        let tracks = m.tracks.unwrap();
        assert!(tracks.deviation.iter().all(|(_, d)| *d == 0.0) && tracks.pixel_error == 0.0);
    }
}

#[test]
fn repeated_static_points_keep_normal_consistency_exact() {
    // A static camera sees the same background at every time step.
    let seq = generate_scene(&SceneConfig::for_setting(CameraSetting::MonoStatic), 31).unwrap();
    let m = evaluate(&Prediction::from_ground_truth(&seq), &seq, &EvalOptions::default()).unwrap();
    assert!((m.points.nc_mean - 1.0).abs() < 1e-9, "{:?}", m.points);
}

fn random_similarity(seed: [f64; 7]) -> (f64, Rotation3<f64>, Vec3) {
    let scale = 0.2 + seed[0].abs() * 3.0;
    let rot = Rotation3::from_euler_angles(seed[1] * 3.0, seed[2] * 1.5, seed[3] * 3.0);
    (scale, rot, Vector3::new(seed[4], seed[5], seed[6]) * 5.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn umeyama_recovers_similarity(
        params in prop::array::uniform7(-1.0f64..1.0),
        cloud in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 50),
    ) {
        let (s, r, t) = random_similarity(params);
        let src: Vec<Vec3> = cloud.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| r * p * s + t).collect();
        let sim = umeyama_align(&src, &dst).unwrap();
        prop_assert!((sim.scale - s).abs() < 1e-9);
        prop_assert!((sim.rotation - r.into_inner()).abs().max() < 1e-9);
        prop_assert!((sim.translation - t).norm() < 1e-9);
    }

    #[test]
    fn depth_metrics_ignore_affine_changes(a in 0.1f64..5.0, b in -0.5f64..2.0, seed in 0u64..50) {
        let seq = tiny_scene(CameraSetting::MonoDynamic, seed);
        let gt = seq.depth.data();
        let pred: Vec<f64> = gt.iter().map(|d| a * d + b).collect();
        let m = depth_metrics(&pred, gt, seq.validity.data(), false).unwrap();
        prop_assert!(m.abs_rel < 1e-9);
        prop_assert_eq!(m.delta, 1.0);
    }

    #[test]
    fn pose_metrics_ignore_similarity_changes(params in prop::array::uniform7(-1.0f64..1.0), seed in 0u64..50) {
        let seq = tiny_scene(CameraSetting::MonoDynamic, seed);
        let (s, r, t) = random_similarity(params);
        let gt: Vec<CameraParams> = (0..seq.times()).map(|i| seq.camera(0, i)).collect();
        let pred: Vec<CameraParams> = gt
            .iter()
            .map(|c| {
                let p = c.pose();
                let moved = Pose { rotation: r.into_inner() * p.rotation, center: r * p.center * s + t };
                CameraParams::from_pose(&moved, c.focal)
            })
            .collect();
        let m = pose_metrics(&pred, &gt, seq.times()).unwrap();
        prop_assert!(m.ate < 1e-9 && m.rte < 1e-9 && m.rre < 1e-5, "{:?}", m);
    }
}
