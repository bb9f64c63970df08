//! Task losses and the weighted multi-task objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, SparseMap, Tensor, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cam: f64,
    pub depth: f64,
    pub mask: f64,
    pub point: f64,
    pub track: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cam: 1.0,
            depth: 0.8,
            mask: 0.8,
            point: 0.9,
            track: 0.1,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.cam, self.depth, self.mask, self.point, self.track];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0: {ws:?}")));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be > 0, got {}", self.huber_delta)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.cam, self.depth, self.mask, self.point, self.track]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Averages over frames and pixels.
    #[default]
    Mean,
    /// Sums over frames and pixels.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackLoss {
    #[default]
    Chamfer,
    /// Squared distance between each query's prediction and its own ground truth.
    PerQuery,
}

fn reduce(g: &mut Graph, x: Var, count: usize, red: Reduction) -> Var {
    let s = g.sum(x);
    match red {
        Reduction::Mean => g.scale(s, 1.0 / count as f64),
        Reduction::Sum => s,
    }
}

/// Huber penalty on every component of `[F × 9]` encodings, summed over
/// components and reduced over frames.
pub fn camera_loss(g: &mut Graph, pred: Var, gt: &Tensor, delta: f64, red: Reduction) -> Result<Var> {
    let n = g.value(pred).len();
    if gt.len() != n || g.value(pred).cols() != 9 {
        return Err(Error::Shape(format!(
            "camera prediction {:?} vs ground truth {:?}",
            g.shape(pred),
            gt.shape()
        )));
    }
    let gt = g.input(gt.clone().reshape(g.shape(pred))?);
    let r = g.sub(pred, gt);
    let h = g.unary(r, Unary::Huber(delta));
    Ok(reduce(g, h, n / 9, red))
}

/// Mean squared error plus L1 mismatch of forward differences, per channel,
/// over pixels marked valid. `pred` is `[F·H·W × C]` or `[F·H·W]`.
#[allow(clippy::too_many_arguments)]
fn dense_loss(
    g: &mut Graph,
    pred: Var,
    gt: &[f64],
    validity: &[f64],
    frames: usize,
    h: usize,
    w: usize,
    channels: usize,
    red: Reduction,
) -> Result<Var> {
    let npx = frames * h * w;
    if g.value(pred).len() != npx * channels || gt.len() != npx * channels || validity.len() != npx {
        return Err(Error::Shape(format!(
            "dense loss: prediction {:?}, ground truth {}, validity {}, expected {npx}x{channels}",
            g.shape(pred),
            gt.len(),
            validity.len()
        )));
    }
    let valid: Vec<usize> = (0..npx).filter(|&k| validity[k] > 0.5).collect();
    if valid.is_empty() {
        return Err(Error::Invalid("no valid pixels".into()));
    }
    let ok = |k: usize| validity[k] > 0.5;
    let mut pairs = Vec::new();
    for k in 0..npx {
        let x = k % w;
        let y = (k / w) % h;
        if x + 1 < w && ok(k) && ok(k + 1) {
            pairs.push((k, k + 1));
        }
        if y + 1 < h && ok(k) && ok(k + w) {
            pairs.push((k, k + w));
        }
    }
    let flat = g.reshape(pred, &[npx * channels]);
    let mut total: Option<Var> = None;
    for c in 0..channels {
        let idx: Vec<usize> = valid.iter().map(|&k| k * channels + c).collect();
        let sel = Arc::new(SparseMap::gather(npx * channels, &idx, &[idx.len()]));
        let p = g.sparse(flat, &sel);
        let gv = g.input(Tensor::from_vec(idx.iter().map(|&i| gt[i]).collect()));
        let diff = g.sub(p, gv);
        let sq = g.square(diff);
        let mut term = reduce(g, sq, valid.len(), red);
        if !pairs.is_empty() {
            let mut b = SparseMap::builder(npx * channels);
            let mut gd = Vec::with_capacity(pairs.len());
            for &(a, z) in &pairs {
                b.push(z * channels + c, 1.0);
                b.push(a * channels + c, -1.0);
                b.end_row();
                gd.push(gt[z * channels + c] - gt[a * channels + c]);
            }
            let dmap = Arc::new(b.finish(&[pairs.len()]));
            let dp = g.sparse(flat, &dmap);
            let dg = g.input(Tensor::from_vec(gd));
            let e = g.sub(dp, dg);
            let e = g.abs(e);
            let grad_term = reduce(g, e, pairs.len(), red);
            term = g.add(term, grad_term);
        }
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one channel"))
}

pub fn depth_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    validity: &Tensor,
    image: (usize, usize),
    red: Reduction,
) -> Result<Var> {
    let (h, w) = image;
    let frames = validity.len() / (h * w);
    dense_loss(g, pred, gt.data(), validity.data(), frames, h, w, 1, red)
}

/// Depth-style loss applied to each of the three point-map channels and summed.
pub fn point_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    validity: &Tensor,
    image: (usize, usize),
    red: Reduction,
) -> Result<Var> {
    let (h, w) = image;
    let frames = validity.len() / (h * w);
    dense_loss(g, pred, gt.data(), validity.data(), frames, h, w, 3, red)
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy with probabilities clamped to `[1e−7, 1 − 1e−7]`.
pub fn mask_loss(g: &mut Graph, pred: Var, gt: &Tensor, red: Reduction) -> Result<Var> {
    let n = g.value(pred).len();
    if gt.len() != n {
        return Err(Error::Shape(format!("mask prediction {n} vs ground truth {}", gt.len())));
    }
    if let Some(bad) = gt.data().iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(Error::Invalid(format!("mask ground truth must be binary, found {bad}")));
    }
    let flat = g.reshape(pred, &[n]);
    let p = g.unary(flat, Unary::Clamp(BCE_CLAMP, 1.0 - BCE_CLAMP));
    let lp = g.log(p);
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let lq = g.log(q);
    let y = g.input(Tensor::from_vec(gt.data().to_vec()));
    let y1 = g.input(Tensor::from_vec(gt.data().iter().map(|v| 1.0 - v).collect()));
    let a = g.mul(y, lp);
    let b = g.mul(y1, lq);
    let s = g.add(a, b);
    let s = g.scale(s, -1.0);
    Ok(reduce(g, s, n, red))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `set` to `p`; ties go to the first index.
fn nearest(p: &[f64], set: &[f64], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, q) in set.chunks(dim).enumerate() {
        let d = sq_dist(p, q);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Symmetric Chamfer distance with squared Euclidean costs between the rows
/// of `pred` (`[m × D]`) and the constant set `gt` (`m' × D`, row-major).
pub fn chamfer(g: &mut Graph, pred: Var, gt: &[f64]) -> Result<Var> {
    let (m, dim) = (g.value(pred).rows(), g.value(pred).cols());
    if m == 0 || gt.is_empty() || gt.len() % dim != 0 {
        return Err(Error::Invalid("chamfer needs two non-empty point sets".into()));
    }
    let mp = gt.len() / dim;
    let pv = g.value(pred).data().to_vec();
    let to_gt: Vec<f64> = pv
        .chunks(dim)
        .flat_map(|a| {
            let j = nearest(a, gt, dim);
            gt[j * dim..(j + 1) * dim].to_vec()
        })
        .collect();
    let b_sel = g.input(Tensor::new(vec![m, dim], to_gt)?);
    let d1 = g.sub(pred, b_sel);
    let d1 = g.square(d1);
    let s1 = g.sum(d1);
    let s1 = g.scale(s1, 1.0 / m as f64);
    let back: Vec<usize> = gt.chunks(dim).map(|b| nearest(b, &pv, dim)).collect();
    let a_sel = g.gather_rows(pred, &back);
    let b = g.input(Tensor::new(vec![mp, dim], gt.to_vec())?);
    let d2 = g.sub(a_sel, b);
    let d2 = g.square(d2);
    let s2 = g.sum(d2);
    let s2 = g.scale(s2, 1.0 / mp as f64);
    Ok(g.add(s1, s2))
}

/// Ground-truth tracks matched to prediction rows ordered (t, query).
#[derive(Debug, Clone)]
pub struct TrackTargets<'a> {
    /// View of each query; queries sharing a view and time form one set.
    pub views: &'a [usize],
    /// `[T·N × 2]` pixels.
    pub tracks_2d: &'a [f64],
    /// `[T·N × 3]` reference coordinates.
    pub tracks_3d: &'a [f64],
    /// Pixel coordinates are divided by this before comparison.
    pub pixel_scale: f64,
}

/// 2D plus 3D set distance per frame, reduced over frames.
pub fn tracking_loss(
    g: &mut Graph,
    pred_2d: Var,
    pred_3d: Var,
    gt: &TrackTargets<'_>,
    kind: TrackLoss,
    red: Reduction,
) -> Result<Var> {
    let n = gt.views.len();
    let rows = g.value(pred_2d).rows();
    if n == 0 || rows % n != 0 || g.value(pred_3d).rows() != rows {
        return Err(Error::Shape(format!(
            "track predictions {:?}/{:?} for {n} queries",
            g.shape(pred_2d),
            g.shape(pred_3d)
        )));
    }
    if gt.tracks_2d.len() != rows * 2 || gt.tracks_3d.len() != rows * 3 {
        return Err(Error::Shape("track targets do not match predictions".into()));
    }
    let tn = rows / n;
    let s2 = g.scale(pred_2d, 1.0 / gt.pixel_scale);
    let gt2: Vec<f64> = gt.tracks_2d.iter().map(|v| v / gt.pixel_scale).collect();
    let mut views: Vec<usize> = gt.views.to_vec();
    views.sort_unstable();
    views.dedup();
    let mut per_frame = Vec::new();
    for t in 0..tn {
        for &v in &views {
            let set: Vec<usize> = (0..n).filter(|&i| gt.views[i] == v).map(|i| t * n + i).collect();
            let a2 = g.gather_rows(s2, &set);
            let a3 = g.gather_rows(pred_3d, &set);
            let b2: Vec<f64> = set.iter().flat_map(|&r| [gt2[2 * r], gt2[2 * r + 1]]).collect();
            let b3: Vec<f64> = set.iter().flat_map(|&r| gt.tracks_3d[3 * r..3 * r + 3].to_vec()).collect();
            let term = match kind {
                TrackLoss::Chamfer => {
                    let c2 = chamfer(g, a2, &b2)?;
                    let c3 = chamfer(g, a3, &b3)?;
                    g.add(c2, c3)
                }
                TrackLoss::PerQuery => {
                    let m = set.len() as f64;
                    let b2 = g.input(Tensor::new(vec![set.len(), 2], b2)?);
                    let b3 = g.input(Tensor::new(vec![set.len(), 3], b3)?);
                    let d2 = g.sub(a2, b2);
                    let d3 = g.sub(a3, b3);
                    let d2 = g.square(d2);
                    let d3 = g.square(d3);
                    let s = g.concat_cols(&[d2, d3]);
                    let s = g.sum(s);
                    g.scale(s, 1.0 / m)
                }
            };
            per_frame.push(term);
        }
    }
    let count = per_frame.len();
    let cells: Vec<Var> = per_frame.iter().map(|v| g.reshape(*v, &[1, 1])).collect();
    let all = g.concat_rows(&cells);
    Ok(reduce(g, all, count, red))
}

/// Component losses of one evaluation; `None` when a task was not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub cam: Option<Var>,
    pub depth: Option<Var>,
    pub mask: Option<Var>,
    pub point: Option<Var>,
    pub track: Option<Var>,
}

impl LossParts {
    pub fn as_array(&self) -> [Option<Var>; 5] {
        [self.cam, self.depth, self.mask, self.point, self.track]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cam: Option<f64>,
    pub depth: Option<f64>,
    pub mask: Option<f64>,
    pub point: Option<f64>,
    pub track: Option<f64>,
    pub total: f64,
}

pub const TASK_NAMES: [&str; 5] = ["cam", "depth", "mask", "point", "track"];

/// Weighted sum `Σ λ_i · loss_i` over the computed components.
pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    let mut vals = [None; 5];
    for (k, (part, w)) in parts.as_array().into_iter().zip(weights.as_array()).enumerate() {
        let Some(v) = part else { continue };
        vals[k] = Some(g.value(v).item());
        let term = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let total = match acc {
        Some(v) => v,
        None => g.scalar(0.0),
    };
    let report = LossReport {
        cam: vals[0],
        depth: vals[1],
        mask: vals[2],
        point: vals[3],
        track: vals[4],
        total: g.value(total).item(),
    };
    Ok((total, report))
}
