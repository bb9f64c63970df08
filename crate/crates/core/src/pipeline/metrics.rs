//! Evaluation metrics for poses, depth, masks, point clouds and tracks.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, CameraParams, Mat3, Vec3};

use super::align::{umeyama_align, Similarity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub rte: f64,
    /// Degrees.
    pub rre: f64,
}

/// Similarity alignment of predicted onto ground-truth camera centers.
/// Trajectories without spatial spread fall back to centroid matching.
pub fn trajectory_alignment(pred: &[Vec3], gt: &[Vec3]) -> Result<Similarity> {
    match umeyama_align(pred, gt) {
        Ok(s) => Ok(s),
        Err(Error::Degenerate(_)) => {
            let n = pred.len() as f64;
            let mp = pred.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
            let mg = gt.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
            Ok(Similarity {
                translation: mg - mp,
                ..Similarity::identity()
            })
        }
        Err(e) => Err(e),
    }
}

/// `pred` and `gt` hold `views × times` cameras, view-major.
pub fn pose_metrics(pred: &[CameraParams], gt: &[CameraParams], times: usize) -> Result<PoseMetrics> {
    if pred.len() != gt.len() || times == 0 || gt.len() % times != 0 {
        return Err(Error::Shape(format!(
            "{} predicted vs {} reference poses with {times} time steps",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::Invalid("pose metrics need at least 2 frames".into()));
    }
    let pp: Vec<_> = pred.iter().map(|c| c.pose()).collect();
    let gp: Vec<_> = gt.iter().map(|c| c.pose()).collect();
    let pc: Vec<Vec3> = pp.iter().map(|p| p.center).collect();
    let gc: Vec<Vec3> = gp.iter().map(|p| p.center).collect();
    let sim = trajectory_alignment(&pc, &gc)?;
    let sq: f64 = pc.iter().zip(&gc).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    let ate = (sq / pc.len() as f64).sqrt();

    let (mut rte, mut rre, mut pairs) = (0.0, 0.0, 0usize);
    for start in (0..gt.len()).step_by(times) {
        for i in start..start + times - 1 {
            let rel = |p: &[crate::geometry::Pose]| -> (Mat3, Vec3) {
                let rt = p[i].rotation.transpose();
                (rt * p[i + 1].rotation, rt * (p[i + 1].center - p[i].center))
            };
            let (rp, tp) = rel(&pp);
            let (rg, tg) = rel(&gp);
            rte += (tp * sim.scale - tg).norm();
            rre += rotation_angle_deg(&(rp.transpose() * rg));
            pairs += 1;
        }
    }
    let k = pairs.max(1) as f64;
    Ok(PoseMetrics {
        ate,
        rte: rte / k,
        rre: rre / k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta: f64,
}

/// Least-squares `(a, b)` with `a·x + b ≈ y`.
fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        return (0.0, my);
    }
    let a = sxy / sxx;
    (a, my - a * mx)
}

/// AbsRel and δ<1.25 after a scale-shift fit over valid pixels.
pub fn depth_metrics(pred: &[f64], gt: &[f64], validity: &[f64], align_disparity: bool) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != validity.len() {
        return Err(Error::Shape("depth metric inputs differ in length".into()));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| validity[i] > 0.5).collect();
    if idx.is_empty() {
        return Err(Error::Invalid("no valid depth pixels".into()));
    }
    if idx.iter().any(|&i| gt[i] <= 0.0) {
        return Err(Error::Invalid("reference depth must be positive on valid pixels".into()));
    }
    let g: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let aligned: Vec<f64> = if align_disparity {
        let inv = |d: &f64| 1.0 / d.max(1e-6);
        let (pi, gi): (Vec<f64>, Vec<f64>) = (p.iter().map(inv).collect(), g.iter().map(inv).collect());
        let (a, b) = affine_fit(&pi, &gi);
        pi.iter().map(|d| 1.0 / (a * d + b).max(1e-6)).collect()
    } else {
        let (a, b) = affine_fit(&p, &g);
        p.iter().map(|d| a * d + b).collect()
    };
    Ok(depth_scores(&aligned, &g))
}

/// AbsRel and inlier ratio of already aligned depths.
pub fn depth_scores(aligned: &[f64], gt: &[f64]) -> DepthMetrics {
    let n = gt.len() as f64;
    let abs_rel = aligned.iter().zip(gt).map(|(a, d)| (a - d).abs() / d).sum::<f64>() / n;
    let inliers = aligned
        .iter()
        .zip(gt)
        .filter(|(a, d)| **a > 0.0 && (*a / *d).max(*d / *a) < 1.25)
        .count();
    DepthMetrics {
        abs_rel,
        delta: inliers as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub j_mean: f64,
    pub j_recall: f64,
}

/// Per-frame IoU of thresholded probabilities against a binary reference.
pub fn seg_metrics(pred: &[f64], gt: &[f64], frames: usize, threshold: f64) -> Result<SegMetrics> {
    if pred.len() != gt.len() || frames == 0 || gt.len() % frames != 0 {
        return Err(Error::Shape("mask metric inputs do not split into frames".into()));
    }
    let per = gt.len() / frames;
    let ious: Vec<f64> = (0..frames)
        .map(|f| {
            let (mut inter, mut union) = (0usize, 0usize);
            for i in f * per..(f + 1) * per {
                let (a, b) = (pred[i] > threshold, gt[i] > 0.5);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    let n = frames as f64;
    Ok(SegMetrics {
        j_mean: ious.iter().sum::<f64>() / n,
        j_recall: ious.iter().filter(|&&v| v > 0.5).count() as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

pub const NORMAL_NEIGHBORS: usize = 8;

/// Distances this close to the nearest one count as ties, so duplicated
/// points cannot flip the match on rounding alone.
const TIE_TOL: f64 = 1e-9;

/// Nearest distance from `p` into `cloud` with every index tied for it.
fn nearest(p: &Vec3, cloud: &[Vec3], ties: &mut Vec<(usize, f64)>) -> f64 {
    ties.clear();
    let mut best = f64::INFINITY;
    for (j, q) in cloud.iter().enumerate() {
        let d = (p - q).norm();
        if d <= best + TIE_TOL {
            if d < best {
                best = d;
                ties.retain(|&(_, e)| e <= best + TIE_TOL);
            }
            ties.push((j, d));
        }
    }
    best
}

fn best_cos(n: &Vec3, ties: &[(usize, f64)], normals: &[Vec3]) -> f64 {
    ties.iter().map(|&(j, _)| abs_cos(n, &normals[j])).fold(0.0, f64::max)
}

/// Unit normals from a plane fit to each point and its nearest neighbors.
pub fn estimate_normals(cloud: &[Vec3]) -> Result<Vec<Vec3>> {
    let k = NORMAL_NEIGHBORS;
    if cloud.len() <= k {
        return Err(Error::Invalid(format!(
            "normal estimation needs more than {k} points, got {}",
            cloud.len()
        )));
    }
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    Ok(cloud
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dist.clear();
            dist.extend(cloud.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, q)| ((p - q).norm_squared(), j)));
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let hood: Vec<Vec3> = std::iter::once(*p).chain(dist[..k].iter().map(|&(_, j)| cloud[j])).collect();
            let mu = hood.iter().fold(Vec3::zeros(), |a, q| a + q) / hood.len() as f64;
            let cov = hood.iter().fold(Mat3::zeros(), |a, q| a + (q - mu) * (q - mu).transpose());
            let eig = SymmetricEigen::new(cov);
            let (mut m, mut best) = (0, f64::INFINITY);
            for c in 0..3 {
                if eig.eigenvalues[c] < best {
                    best = eig.eigenvalues[c];
                    m = c;
                }
            }
            eig.eigenvectors.column(m).into_owned()
        })
        .collect())
}

fn abs_cos(a: &Vec3, b: &Vec3) -> f64 {
    let den = (a.norm_squared() * b.norm_squared()).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (a.dot(b).abs() / den).min(1.0)
    }
}

fn mean_median(v: &mut [f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    (mean, median)
}

/// Accuracy, completion and normal consistency of two clouds in one frame.
pub fn pointmap_metrics(pred: &[Vec3], gt: &[Vec3]) -> Result<PointMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("point metrics need non-empty clouds".into()));
    }
    let (np, ng) = (estimate_normals(pred)?, estimate_normals(gt)?);
    score_clouds(pred, &np, gt, &ng)
}

fn score_clouds(pred: &[Vec3], np: &[Vec3], gt: &[Vec3], ng: &[Vec3]) -> Result<PointMetrics> {
    let mut acc = Vec::with_capacity(pred.len());
    let mut comp = Vec::with_capacity(gt.len());
    let mut nc = Vec::with_capacity(pred.len() + gt.len());
    let mut ties = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        acc.push(nearest(p, gt, &mut ties));
        nc.push(best_cos(&np[i], &ties, ng));
    }
    for (j, q) in gt.iter().enumerate() {
        comp.push(nearest(q, pred, &mut ties));
        nc.push(best_cos(&ng[j], &ties, np));
    }
    let (acc_mean, acc_median) = mean_median(&mut acc);
    let (comp_mean, comp_median) = mean_median(&mut comp);
    let (nc_mean, nc_median) = mean_median(&mut nc);
    Ok(PointMetrics {
        acc_mean,
        acc_median,
        comp_mean,
        comp_median,
        nc_mean,
        nc_median,
    })
}

/// Aligns corresponded clouds with a similarity fit before scoring.
/// Predicted normals are estimated before the move and rotated with it, so
/// rounding in the alignment cannot reshuffle tied neighbors.
pub fn pointmap_metrics_aligned(pred: &[Vec3], gt: &[Vec3]) -> Result<PointMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("point metrics need non-empty clouds".into()));
    }
    let sim = trajectory_alignment(pred, gt)?;
    let moved: Vec<Vec3> = pred.iter().map(|p| sim.apply(p)).collect();
    let np: Vec<Vec3> = estimate_normals(pred)?.iter().map(|n| sim.rotation * n).collect();
    score_clouds(&moved, &np, gt, &estimate_normals(gt)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    /// `(horizon, percent deviation)` per requested horizon.
    pub deviation: Vec<(usize, f64)>,
    /// Mean pixel distance over every frame and query.
    pub pixel_error: f64,
}

/// Percent deviation of predicted 2D tracks `[T × N × 2]` relative to the
/// extent of each reference trajectory. Horizons longer than `T` are clipped.
pub fn tracking_metrics(
    pred: &[f64],
    gt: &[f64],
    times: usize,
    queries: usize,
    horizons: &[usize],
) -> Result<TrackMetrics> {
    if pred.len() != gt.len() || pred.len() != times * queries * 2 || queries == 0 || times == 0 {
        return Err(Error::Shape(format!(
            "track arrays of {} / {} values for {times} frames x {queries} queries",
            pred.len(),
            gt.len()
        )));
    }
    let at = |a: &[f64], t: usize, i: usize| [a[(t * queries + i) * 2], a[(t * queries + i) * 2 + 1]];
    let err = |t: usize, i: usize| {
        let (p, g) = (at(pred, t, i), at(gt, t, i));
        ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
    };
    let deviation = horizons
        .iter()
        .map(|&h| {
            let h = h.min(times).max(1);
            let total: f64 = (0..queries)
                .map(|i| {
                    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                    for t in 0..h {
                        let g = at(gt, t, i);
                        for c in 0..2 {
                            lo[c] = lo[c].min(g[c]);
                            hi[c] = hi[c].max(g[c]);
                        }
                    }
                    let extent = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt().max(1.0);
                    let mean = (0..h).map(|t| err(t, i)).sum::<f64>() / h as f64;
                    100.0 * mean / extent
                })
                .sum();
            (h, total / queries as f64)
        })
        .collect();
    let pixel_error = (0..times)
        .flat_map(|t| (0..queries).map(move |i| (t, i)))
        .map(|(t, i)| err(t, i))
        .sum::<f64>()
        / (times * queries) as f64;
    Ok(TrackMetrics {
        deviation,
        pixel_error,
    })
}

/// Every metric of one scene, in a fixed reporting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pose: PoseMetrics,
    pub depth: DepthMetrics,
    pub seg: SegMetrics,
    pub points: PointMetrics,
    pub tracks: Option<TrackMetrics>,
    /// Requested horizons, so rows keep stable names when a scene has no tracks.
    pub horizons: Vec<usize>,
}

impl MetricsReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = vec![
            ("ate".into(), self.pose.ate),
            ("rte".into(), self.pose.rte),
            ("rre_deg".into(), self.pose.rre),
            ("abs_rel".into(), self.depth.abs_rel),
            ("delta_1.25".into(), self.depth.delta),
            ("j_m".into(), self.seg.j_mean),
            ("j_r".into(), self.seg.j_recall),
            ("acc_mean".into(), self.points.acc_mean),
            ("acc_median".into(), self.points.acc_median),
            ("comp_mean".into(), self.points.comp_mean),
            ("comp_median".into(), self.points.comp_median),
            ("nc_mean".into(), self.points.nc_mean),
            ("nc_median".into(), self.points.nc_median),
        ];
        if let Some(t) = &self.tracks {
            for (k, &h) in self.horizons.iter().enumerate() {
                rows.push((format!("deviation_{h}"), t.deviation[k].1));
            }
            rows.push(("track_px".into(), t.pixel_error));
        }
        rows
    }

    /// Range checks every report must satisfy.
    pub fn check_ranges(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.pose.ate >= 0.0
            && self.pose.rte >= 0.0
            && self.pose.rre >= 0.0
            && self.depth.abs_rel >= 0.0
            && unit(self.depth.delta)
            && unit(self.seg.j_mean)
            && unit(self.seg.j_recall)
            && (-1.0..=1.0).contains(&self.points.nc_mean)
            && (-1.0..=1.0).contains(&self.points.nc_median)
            && self.rows().iter().all(|(_, v)| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("metric outside its range: {:?}", self.rows())))
        }
    }
}

/// `scene,metric,value` rows for every report, in input order.
pub fn metrics_csv(reports: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("scene,metric,value\n");
    for (scene, r) in reports {
        for (name, v) in r.rows() {
            s.push_str(&format!("{scene},{name},{v}\n"));
        }
    }
    s
}
