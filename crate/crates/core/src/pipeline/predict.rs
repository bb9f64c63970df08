//! Whole-scene inference, prediction files and per-scene evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Vec3};
use crate::numerics::container::{read_tensors, write_tensors};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::scenes::{parse_tracks_csv, tracks_csv, SceneSequence, TrackSet};

use super::batch::full_batch;
use super::metrics::{
    depth_metrics, pointmap_metrics_aligned, pose_metrics, seg_metrics, tracking_metrics, MetricsReport,
};
use super::model::{Model, Need};

pub const PREDICTION_VERSION: u32 = 1;

/// Per-frame outputs of one scene, in the layout of the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub views: usize,
    pub times: usize,
    pub height: usize,
    pub width: usize,
    /// View-major.
    pub cameras: Vec<CameraParams>,
    /// `[V, T, H, W]`.
    pub depth: Tensor,
    /// `[V, T, H, W]` probabilities.
    pub mask: Tensor,
    /// `[V, T, H, W, 3]`.
    pub points: Tensor,
    pub tracks: Option<TrackSet>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionMeta {
    format_version: u32,
    views: usize,
    times: usize,
    height: usize,
    width: usize,
}

impl Prediction {
    /// The ground truth itself, as a perfect prediction.
    pub fn from_ground_truth(seq: &SceneSequence) -> Self {
        let c = &seq.config;
        Self {
            views: c.views,
            times: c.times,
            height: c.height,
            width: c.width,
            cameras: (0..c.views)
                .flat_map(|v| (0..c.times).map(move |t| (v, t)))
                .map(|(v, t)| seq.camera(v, t))
                .collect(),
            depth: seq.depth.clone(),
            mask: seq.mask.clone(),
            points: seq.points.clone(),
            tracks: (!seq.tracks.is_empty()).then(|| seq.tracks.clone()),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = PredictionMeta {
            format_version: PREDICTION_VERSION,
            views: self.views,
            times: self.times,
            height: self.height,
            width: self.width,
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
        let cams = Tensor::new(
            vec![self.views, self.times, CameraParams::LEN],
            self.cameras.iter().flat_map(|c| c.to_array()).collect(),
        )?;
        write_tensors(
            &dir.join("predictions.q4dg"),
            &[
                ("cameras", &cams),
                ("depth", &self.depth),
                ("mask", &self.mask),
                ("points", &self.points),
            ],
        )?;
        if let Some(tr) = &self.tracks {
            let p = dir.join("tracks.csv");
            fs::write(&p, tracks_csv(tr)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != PREDICTION_VERSION {
            return Err(Error::Version {
                found,
                expected: PREDICTION_VERSION,
            });
        }
        let meta: PredictionMeta = serde_json::from_value(raw)?;
        let (v, t, h, w) = (meta.views, meta.times, meta.height, meta.width);
        let path = dir.join("predictions.q4dg");
        let mut recs = read_tensors(&path)?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let k = recs.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Corrupt {
                path: path.clone(),
                reason: format!("missing record {name}"),
            })?;
            let t = recs.swap_remove(k).1;
            if t.shape() != shape {
                return Err(Error::Corrupt {
                    path: path.clone(),
                    reason: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            Ok(t)
        };
        let cams = take("cameras", &[v, t, 9])?;
        let depth = take("depth", &[v, t, h, w])?;
        let mask = take("mask", &[v, t, h, w])?;
        let points = take("points", &[v, t, h, w, 3])?;
        let csv = dir.join("tracks.csv");
        let tracks = if csv.is_file() {
            let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
            Some(parse_tracks_csv(&text, t, &csv)?)
        } else {
            None
        };
        Ok(Self {
            views: v,
            times: t,
            height: h,
            width: w,
            cameras: cams
                .data()
                .chunks(9)
                .map(CameraParams::from_slice)
                .collect::<Result<_>>()?,
            depth,
            mask,
            points,
            tracks,
        })
    }

    /// Checks shapes and value ranges every prediction must satisfy.
    pub fn check(&self) -> Result<()> {
        let frames = self.views * self.times;
        let hw = self.height * self.width;
        if self.cameras.len() != frames || self.depth.len() != frames * hw || self.points.len() != frames * hw * 3 {
            return Err(Error::Shape("prediction arrays do not match its grid".into()));
        }
        for c in &self.cameras {
            let n: f64 = c.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 || c.quat[0] < 0.0 || c.focal.iter().any(|f| *f <= 0.0) {
                return Err(Error::Invalid(format!("camera {c:?} violates its encoding")));
            }
        }
        if self.depth.data().iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Invalid("non-positive depth".into()));
        }
        if self.mask.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Invalid("mask probability outside [0, 1]".into()));
        }
        if !self.points.is_finite() {
            return Err(Error::NonFinite("point map".into()));
        }
        Ok(())
    }
}

/// Runs every head on the full scene.
pub fn predict(model: &Model, store: &ParamStore, seq: &SceneSequence) -> Result<Prediction> {
    let batch = full_batch(seq, model.config.patch)?;
    let c = &seq.config;
    let (v, t, h, w) = (c.views, c.times, c.height, c.width);
    let mut g = Graph::new();
    let feats = model.features(&mut g, store, &batch.frames, batch.setting)?;
    let need = Need {
        track: batch.has_tracks(),
        ..Need::all()
    };
    let out = model.heads(&mut g, store, &feats, batch.image, batch.has_tracks().then_some(&batch.queries), need)?;
    g.ensure_finite()?;
    let value = |var: Option<crate::numerics::Var>| g.value(var.expect("head output")).data().to_vec();
    let tracks = match out.tracks {
        Some(tr) => {
            let n = batch.queries.len();
            Some(TrackSet {
                query_view: seq.tracks.query_view.clone(),
                tracks_2d: Tensor::new(vec![t, n, 2], g.value(tr.tracks_2d).data().to_vec())?,
                tracks_3d: Tensor::new(vec![t, n, 3], g.value(tr.tracks_3d).data().to_vec())?,
            })
        }
        None => None,
    };
    Ok(Prediction {
        views: v,
        times: t,
        height: h,
        width: w,
        cameras: value(out.cameras)
            .chunks(9)
            .map(CameraParams::from_slice)
            .collect::<Result<_>>()?,
        depth: Tensor::new(vec![v, t, h, w], value(out.depth))?,
        mask: Tensor::new(vec![v, t, h, w], value(out.mask))?,
        points: Tensor::new(vec![v, t, h, w, 3], value(out.points))?,
        tracks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub align_disparity: bool,
    pub horizons: [usize; 2],
    /// Pixel stride of the point-cloud subsample.
    pub point_stride: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            align_disparity: false,
            horizons: [12, 24],
            point_stride: 2,
        }
    }
}

/// Scores a prediction against its scene.
pub fn evaluate(pred: &Prediction, seq: &SceneSequence, opts: &EvalOptions) -> Result<MetricsReport> {
    let c = &seq.config;
    if (pred.views, pred.times, pred.height, pred.width) != (c.views, c.times, c.height, c.width) {
        return Err(Error::Shape(format!(
            "prediction grid {}x{} at {}x{} does not match the scene",
            pred.views, pred.times, pred.height, pred.width
        )));
    }
    let gt = Prediction::from_ground_truth(seq);
    let pose = pose_metrics(&pred.cameras, &gt.cameras, c.times)?;
    let depth = depth_metrics(pred.depth.data(), seq.depth.data(), seq.validity.data(), opts.align_disparity)?;
    let seg = seg_metrics(pred.mask.data(), seq.mask.data(), seq.frame_count(), 0.5)?;

    let (h, w, s) = (c.height, c.width, opts.point_stride.max(1));
    let (mut pc, mut gc) = (Vec::new(), Vec::new());
    for f in 0..seq.frame_count() {
        for y in (0..h).step_by(s) {
            for x in (0..w).step_by(s) {
                let i = (f * h + y) * w + x;
                if seq.validity.data()[i] > 0.5 {
                    let at = |t: &Tensor| Vec3::new(t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]);
                    pc.push(at(&pred.points));
                    gc.push(at(&seq.points));
                }
            }
        }
    }
    let points = pointmap_metrics_aligned(&pc, &gc)?;

    let tracks = match (&pred.tracks, seq.tracks.is_empty()) {
        (Some(p), false) => Some(tracking_metrics(
            p.tracks_2d.data(),
            seq.tracks.tracks_2d.data(),
            c.times,
            seq.tracks.len(),
            &opts.horizons,
        )?),
        (None, false) => return Err(Error::Invalid("prediction lacks tracks".into())),
        _ => None,
    };
    let report = MetricsReport {
        pose,
        depth,
        seg,
        points,
        tracks,
        horizons: opts.horizons.to_vec(),
    };
    report.check_ranges()?;
    Ok(report)
}
