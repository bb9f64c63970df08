//! Per-task and multi-task training loops with frozen-group checksums.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Selection;
use crate::losses::{
    camera_loss, depth_loss, mask_loss, point_loss, total_loss, tracking_loss, LossParts, LossReport,
    LossWeights, TrackTargets,
};
use crate::numerics::{Graph, OptimState, ParamStore, Tensor};
use crate::scenes::SceneSequence;

use super::batch::{make_batch, scene_layout, Batch};
use super::config::TrainConfig;
use super::model::{Features, Model, Need, BACKBONE_GROUPS, GROUPS, HEAD_GROUPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pose,
    Depth,
    Mask,
    Point,
    Track,
}

impl Task {
    /// Stage-1 training order.
    pub const ORDER: [Task; 5] = [Task::Pose, Task::Depth, Task::Mask, Task::Point, Task::Track];

    pub fn name(self) -> &'static str {
        match self {
            Task::Pose => "pose",
            Task::Depth => "depth",
            Task::Mask => "mask",
            Task::Point => "point",
            Task::Track => "track",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }

    /// Head groups this task trains in stage 1. Dense tasks share the decoder.
    pub fn head_groups(self) -> &'static [&'static str] {
        match self {
            Task::Pose => &["head_cam"],
            Task::Depth => &["head_dense", "head_depth"],
            Task::Mask => &["head_dense", "head_mask"],
            Task::Point => &["head_dense", "head_point"],
            Task::Track => &["head_track"],
        }
    }

    pub fn need(self) -> Need {
        let mut n = Need::default();
        match self {
            Task::Pose => n.camera = true,
            Task::Depth => n.depth = true,
            Task::Mask => n.mask = true,
            Task::Point => n.point = true,
            Task::Track => n.track = true,
        }
        n
    }

    /// Loss weights that select this task alone at unit weight.
    pub fn weights(self, huber_delta: f64) -> LossWeights {
        let mut w = LossWeights {
            cam: 0.0,
            depth: 0.0,
            mask: 0.0,
            point: 0.0,
            track: 0.0,
            huber_delta,
        };
        match self {
            Task::Pose => w.cam = 1.0,
            Task::Depth => w.depth = 1.0,
            Task::Mask => w.mask = 1.0,
            Task::Point => w.point = 1.0,
            Task::Track => w.track = 1.0,
        }
        w
    }
}

/// One training stage: which groups move, which stay fixed, and for how long.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub tasks: Vec<Task>,
    pub steps: usize,
    pub weights: LossWeights,
}

impl StagePlan {
    pub fn stage1(tasks: &[Task], steps: usize, huber_delta: f64) -> Self {
        let mut ordered: Vec<Task> = Task::ORDER.into_iter().filter(|t| tasks.contains(t)).collect();
        ordered.dedup();
        Self {
            stage: 1,
            tasks: ordered,
            steps,
            weights: LossWeights {
                huber_delta,
                ..LossWeights::default()
            },
        }
    }

    pub fn stage2(steps: usize, weights: LossWeights) -> Self {
        Self {
            stage: 2,
            tasks: Task::ORDER.to_vec(),
            steps,
            weights,
        }
    }

    /// Groups updated while training `task` (stage 1) or the joint loss (stage 2).
    pub fn trainable(&self, task: Option<Task>) -> Vec<&'static str> {
        match (self.stage, task) {
            (1, Some(t)) => BACKBONE_GROUPS.iter().chain(t.head_groups()).copied().collect(),
            (2, _) => HEAD_GROUPS.to_vec(),
            _ => GROUPS.to_vec(),
        }
    }

    pub fn frozen(&self, task: Option<Task>) -> Vec<&'static str> {
        let t = self.trainable(task);
        GROUPS.into_iter().filter(|g| !t.contains(g)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub task: String,
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "stage,task,step,cam,depth,mask,point,track,total,lr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let p = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.stage,
                r.task,
                r.step,
                cell(p.cam),
                cell(p.depth),
                cell(p.mask),
                cell(p.point),
                cell(p.track),
                p.total,
                r.lr
            );
        }
        s
    }
}

type Digests = Vec<(&'static str, [u8; 32])>;

fn digests(store: &ParamStore, groups: &[&'static str]) -> Digests {
    groups.iter().map(|g| (*g, store.group_digest(g))).collect()
}

fn verify(store: &ParamStore, expected: &Digests) -> Result<()> {
    for (g, d) in expected {
        if store.group_digest(g) != *d {
            return Err(Error::FrozenMutation((*g).to_string()));
        }
    }
    Ok(())
}

/// Builds every requested loss term for one batch.
pub fn batch_losses(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    feats: &Features,
    batch: &Batch,
    need: Need,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let need = Need {
        track: need.track && batch.has_tracks(),
        ..need
    };
    let queries = batch.has_tracks().then_some(&batch.queries);
    let out = model.heads(g, store, feats, batch.image, queries, need)?;
    let red = cfg.reduction;
    let mut parts = LossParts::default();
    if need.camera {
        let cams = out.cameras.expect("camera output");
        parts.cam = Some(camera_loss(g, cams, &batch.cameras, cfg.weights.huber_delta, red)?);
    }
    if need.depth {
        let d = out.depth.expect("depth output");
        parts.depth = Some(depth_loss(g, d, &batch.depth, &batch.validity, batch.image, red)?);
    }
    if need.mask {
        let m = out.mask.expect("mask output");
        parts.mask = Some(mask_loss(g, m, &batch.mask, red)?);
    }
    if need.point {
        let p = out.points.expect("point output");
        parts.point = Some(point_loss(g, p, &batch.points, &batch.validity, batch.image, red)?);
    }
    if need.track {
        let tr = out.tracks.expect("track output");
        let targets = TrackTargets {
            views: &batch.queries.views,
            tracks_2d: &batch.tracks_2d,
            tracks_3d: &batch.tracks_3d,
            pixel_scale: cfg.track_pixel_scale,
        };
        parts.track = Some(tracking_loss(g, tr.tracks_2d, tr.tracks_3d, &targets, cfg.track_loss, red)?);
    }
    Ok(parts)
}

/// Loss of every task on the whole scene, weighted by `weights`.
pub fn evaluate_losses(
    model: &Model,
    store: &ParamStore,
    seq: &SceneSequence,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<LossReport> {
    let batch = super::batch::full_batch(seq, model.config.patch)?;
    let mut g = Graph::new();
    let feats = model.features(&mut g, store, &batch.frames, batch.setting)?;
    let parts = batch_losses(&mut g, model, store, &feats, &batch, Need::all(), cfg)?;
    Ok(total_loss(&mut g, &parts, weights)?.1)
}

/// Backbone outputs of one full scene, reused while the backbone is frozen.
struct CachedScene {
    batch: Batch,
    layout: crate::grid::GridLayout,
    spatial: Tensor,
    temporal: Tensor,
}

struct Phase<'a> {
    stage: u8,
    label: &'a str,
    need: Need,
    weights: LossWeights,
    frozen: Vec<&'static str>,
    steps: usize,
    sample: bool,
    stream: u64,
}

fn run_phase(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    phase: &Phase<'_>,
    cache: Option<&[CachedScene]>,
    log: &mut TrainLog,
) -> Result<()> {
    if phase.steps == 0 {
        return Ok(());
    }
    if scenes.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    store.freeze_groups(&phase.frozen);
    let expected = digests(store, &phase.frozen);
    let mut opt = OptimState::new(cfg.optimizer, store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.stream);
    let patch = model.config.patch;

    for step in 0..phase.steps {
        let k = step % scenes.len();
        let mut g = Graph::new();
        let (feats, owned);
        let batch: &Batch = match cache {
            Some(c) => {
                let c = &c[k];
                feats = Features {
                    layout: c.layout,
                    spatial: g.input(c.spatial.clone()),
                    temporal: g.input(c.temporal.clone()),
                };
                &c.batch
            }
            None => {
                let seq = &scenes[k];
                let layout = scene_layout(seq, patch)?;
                let sel = if phase.sample {
                    cfg.sample.sample(&layout, &mut rng)?
                } else {
                    Selection::full(&layout)
                };
                owned = make_batch(seq, &sel, patch)?;
                feats = model.features(&mut g, store, &owned.frames, owned.setting)?;
                &owned
            }
        };
        let parts = batch_losses(&mut g, model, store, &feats, batch, phase.need, cfg)?;
        let (loss, report) = total_loss(&mut g, &parts, &phase.weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at step {step}", phase.label)));
        }
        let grads = g.backward(loss);
        opt.step(store, &grads)?;
        log.rows.push(LogRow {
            stage: phase.stage,
            task: phase.label.to_string(),
            step,
            report,
            lr: cfg.optimizer.lr,
        });
        if (step + 1) % cfg.checksum_every == 0 {
            verify(store, &expected)?;
        }
    }
    verify(store, &expected)?;
    store.freeze_groups(&[]);
    Ok(())
}

/// Trains the plan's tasks in order; each task updates only the backbone
/// and its own head.
pub fn train_stage1(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    plan: &StagePlan,
    log: &mut TrainLog,
) -> Result<()> {
    if plan.stage != 1 {
        return Err(Error::Config(format!("stage-1 trainer given a stage-{} plan", plan.stage)));
    }
    for (k, &task) in plan.tasks.iter().enumerate() {
        let phase = Phase {
            stage: 1,
            label: task.name(),
            need: task.need(),
            weights: task.weights(plan.weights.huber_delta),
            frozen: plan.frozen(Some(task)),
            steps: plan.steps,
            sample: !cfg.no_avg,
            stream: 1 + k as u64,
        };
        run_phase(model, store, scenes, cfg, &phase, None, log)?;
    }
    Ok(())
}

/// Fine-tunes every head on the weighted joint loss with the backbone frozen.
/// Backbone features are computed once per scene on the full grid.
pub fn train_stage2(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    plan: &StagePlan,
    log: &mut TrainLog,
) -> Result<()> {
    if plan.stage != 2 {
        return Err(Error::Config(format!("stage-2 trainer given a stage-{} plan", plan.stage)));
    }
    plan.weights.validate()?;
    if plan.steps == 0 {
        return Ok(());
    }
    let patch = model.config.patch;
    let cache = scenes
        .iter()
        .map(|seq| {
            let batch = super::batch::full_batch(seq, patch)?;
            let mut g = Graph::new();
            let f = model.features(&mut g, store, &batch.frames, batch.setting)?;
            Ok(CachedScene {
                layout: f.layout,
                spatial: g.value(f.spatial).clone(),
                temporal: g.value(f.temporal).clone(),
                batch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let phase = Phase {
        stage: 2,
        label: "joint",
        need: Need::all(),
        weights: plan.weights,
        frozen: plan.frozen(None),
        steps: plan.steps,
        sample: false,
        stream: 16,
    };
    run_phase(model, store, scenes, cfg, &phase, Some(&cache), log)
}

/// Ablation: every group trained at once on the weighted joint loss.
pub fn train_single_stage(
    model: &Model,
    store: &mut ParamStore,
    scenes: &[SceneSequence],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let phase = Phase {
        stage: 0,
        label: "joint",
        need: Need::all(),
        weights: cfg.weights,
        frozen: Vec::new(),
        steps: cfg.steps,
        sample: !cfg.no_avg,
        stream: 32,
    };
    run_phase(model, store, scenes, cfg, &phase, None, log)
}
