//! Camera, dense (depth / mask / point) and tracking heads.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::geometry::principal_point;
use crate::grid::GridLayout;
use crate::numerics::nn::{multi_head_attention, AttentionWeights, FeedForward, Init, LayerNorm, Linear};
use crate::numerics::{Graph, ParamStore, SparseMap, Tensor, Var};

/// Inverse of softplus, used to place initial activations.
fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln_attn: LayerNorm,
    attn: AttentionWeights,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Per-frame pooled descriptors → two self-attention blocks → 9 values.
#[derive(Debug, Clone)]
pub struct CameraHead {
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
    heads: usize,
}

impl CameraHead {
    pub fn init(init: &mut Init<'_>, dim: usize, heads: usize) -> Self {
        let blocks = (0..2)
            .map(|l| Block {
                ln_attn: init.layer_norm(&format!("head_cam.{l}.ln_attn"), dim),
                attn: init.attention(&format!("head_cam.{l}.attn"), dim),
                ln_ff: init.layer_norm(&format!("head_cam.{l}.ln_ff"), dim),
                ff: init.feed_forward(&format!("head_cam.{l}.ff"), dim, 4),
            })
            .collect();
        let ln_out = init.layer_norm("head_cam.ln_out", dim);
        let out = init.linear("head_cam.out", dim, 9);
        for v in init.store.tensor_mut(out.w).data_mut() {
            *v *= 0.1;
        }
        let f = softplus_inv(1.0);
        init.store
            .tensor_mut(out.bias())
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, f, f]);
        Self {
            blocks,
            ln_out,
            out,
            heads,
        }
    }

    /// Raw 9-value outputs, `[V·T × 9]`.
    pub fn raw(&self, g: &mut Graph, store: &ParamStore, fs: Var, layout: &GridLayout) -> Result<Var> {
        let (frames, p) = (layout.frames(), layout.patches());
        let pool = cached_map(MapKey::Pool(frames, p, g.value(fs).cols()), || {
            let d = g.value(fs).cols();
            let mut b = SparseMap::builder(frames * p * d);
            for f in 0..frames {
                for c in 0..d {
                    for k in 0..p {
                        b.push((f * p + k) * d + c, 1.0 / p as f64);
                    }
                    b.end_row();
                }
            }
            b.finish(&[frames, d])
        });
        let mut x = g.sparse(fs, &pool);
        let all = Arc::new(vec![true; frames * frames]);
        for b in &self.blocks {
            let h = b.ln_attn.forward(g, store, x);
            let a = multi_head_attention(g, store, &b.attn, h, h, &all, self.heads)?;
            x = g.add(x, a);
            let h = b.ln_ff.forward(g, store, x);
            let f = b.ff.forward(g, store, h);
            x = g.add(x, f);
        }
        let h = self.ln_out.forward(g, store, x);
        Ok(self.out.forward(g, store, h))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fs: Var, layout: &GridLayout) -> Result<Var> {
        let raw = self.raw(g, store, fs, layout)?;
        Ok(finalize_camera(g, raw))
    }
}

/// Normalizes the quaternion (canonical sign, `w ≥ 0`) and passes focal
/// logits through softplus. Translation is left as is.
pub fn finalize_camera(g: &mut Graph, raw: Var) -> Var {
    let q = g.col_slice(raw, 0, 4);
    let sign: Vec<f64> = g
        .value(q)
        .data()
        .chunks(4)
        .map(|r| if r[0] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let sq = g.square(q);
    let n2 = g.sum_last(sq);
    let n = g.unary(n2, crate::numerics::Unary::Sqrt);
    let inv = g.unary(n, crate::numerics::Unary::Recip);
    let sign = g.input(Tensor::from_vec(sign));
    let s = g.mul(inv, sign);
    let q = g.mul_col(q, s);
    let t = g.col_slice(raw, 4, 3);
    let f = g.col_slice(raw, 7, 2);
    let f = g.softplus(f);
    g.concat_cols(&[q, t, f])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum MapKey {
    Pool(usize, usize, usize),
    Shuffle(usize, usize, usize, usize),
    Im2col(usize, usize, usize, usize),
    Upsample(usize, usize, usize, usize, usize),
}

/// Spatial index maps depend only on shapes; build each once per process.
fn cached_map(key: MapKey, build: impl FnOnce() -> SparseMap) -> Arc<SparseMap> {
    static CACHE: OnceLock<Mutex<HashMap<MapKey, Arc<SparseMap>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return m.clone();
    }
    let m = Arc::new(build());
    cache.lock().unwrap().entry(key).or_insert(m).clone()
}

/// `[F·h·w × 4c]` → `[F·2h·2w × c]`: each row's four `c`-blocks fill a 2×2 cell.
fn pixel_shuffle(frames: usize, h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached_map(MapKey::Shuffle(frames, h, w, c), || {
        let (h2, w2) = (2 * h, 2 * w);
        let idx: Vec<usize> = (0..frames * h2 * w2 * c)
            .map(|o| {
                let ch = o % c;
                let pix = o / c;
                let (f, y, x) = (pix / (h2 * w2), (pix / w2) % h2, pix % w2);
                let src = (f * h + y / 2) * w + x / 2;
                src * 4 * c + ((y % 2) * 2 + x % 2) * c + ch
            })
            .collect();
        SparseMap::gather(frames * h * w * 4 * c, &idx, &[frames * h2 * w2, c])
    })
}

/// 3×3 zero-padded neighborhoods: `[F·h·w × c]` → `[F·h·w × 9c]`.
fn im2col(frames: usize, h: usize, w: usize, c: usize) -> Arc<SparseMap> {
    cached_map(MapKey::Im2col(frames, h, w, c), || {
        let mut b = SparseMap::builder(frames * h * w * c);
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                            let inside = sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64;
                            for ch in 0..c {
                                if inside {
                                    b.push(((f * h + sy as usize) * w + sx as usize) * c + ch, 1.0);
                                }
                                b.end_row();
                            }
                        }
                    }
                }
            }
        }
        b.finish(&[frames * h * w, 9 * c])
    })
}

/// Bilinear upsampling by an integer factor with edge clamping.
fn upsample(frames: usize, h: usize, w: usize, c: usize, k: usize) -> Arc<SparseMap> {
    cached_map(MapKey::Upsample(frames, h, w, c, k), || {
        let taps = |o: usize, n: usize| -> [(usize, f64); 2] {
            let s = ((o as f64 + 0.5) / k as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let a = s - i0 as f64;
            [(i0, 1.0 - a), (i1, a)]
        };
        let (hk, wk) = (h * k, w * k);
        let mut b = SparseMap::builder(frames * h * w * c);
        for f in 0..frames {
            for y in 0..hk {
                let ty = taps(y, h);
                for x in 0..wk {
                    let tx = taps(x, w);
                    for ch in 0..c {
                        for (iy, wy) in ty {
                            for (ix, wx) in tx {
                                if wy * wx != 0.0 {
                                    b.push(((f * h + iy) * w + ix) * c + ch, wy * wx);
                                }
                            }
                        }
                        b.end_row();
                    }
                }
            }
        }
        b.finish(&[frames * hk * wk, c])
    })
}

/// Token maps → full-resolution feature maps via two learned ×2 stages and a
/// final bilinear stage.
#[derive(Debug, Clone)]
pub struct DenseDecoder {
    proj: Linear,
    up1: Linear,
    conv1: Linear,
    up2: Linear,
    conv2: Linear,
    pub channels: [usize; 3],
}

impl DenseDecoder {
    pub fn init(init: &mut Init<'_>, dim: usize, channels: [usize; 3]) -> Self {
        let [c1, c2, c3] = channels;
        Self {
            proj: init.linear("head_dense.decoder.proj", 2 * dim, c1),
            up1: init.linear("head_dense.decoder.up1", c1, 4 * c2),
            conv1: init.linear("head_dense.decoder.conv1", 9 * c2, c2),
            up2: init.linear("head_dense.decoder.up2", c2, 4 * c3),
            conv2: init.linear("head_dense.decoder.conv2", 9 * c3, c3),
            channels,
        }
    }

    /// Returns `[F·H·W × c3]` with rows ordered (frame, y, x).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fs: Var,
        ft: Var,
        layout: &GridLayout,
        patch: usize,
    ) -> Result<Var> {
        if g.shape(fs) != g.shape(ft) {
            return Err(Error::Shape(format!(
                "spatial {:?} and temporal {:?} features differ",
                g.shape(fs),
                g.shape(ft)
            )));
        }
        if patch % 4 != 0 {
            return Err(Error::Layout(format!("decoder needs patch divisible by 4, got {patch}")));
        }
        let [_, c2, c3] = self.channels;
        let (f, h, w) = (layout.frames(), layout.patch_rows, layout.patch_cols);
        let x = g.concat_cols(&[fs, ft]);
        let x = self.proj.forward(g, store, x);
        let x = g.silu(x);
        let x = self.up1.forward(g, store, x);
        let x = g.sparse(x, &pixel_shuffle(f, h, w, c2));
        let x = g.silu(x);
        let (h, w) = (2 * h, 2 * w);
        let n = g.sparse(x, &im2col(f, h, w, c2));
        let n = self.conv1.forward(g, store, n);
        let n = g.silu(n);
        let x = g.add(x, n);
        let x = self.up2.forward(g, store, x);
        let x = g.sparse(x, &pixel_shuffle(f, h, w, c3));
        let x = g.silu(x);
        let (h, w) = (2 * h, 2 * w);
        let n = g.sparse(x, &im2col(f, h, w, c3));
        let n = self.conv2.forward(g, store, n);
        let n = g.silu(n);
        let x = g.add(x, n);
        Ok(g.sparse(x, &upsample(f, h, w, c3, patch / 4)))
    }
}

/// 1×1 projections of the dense features.
#[derive(Debug, Clone, Copy)]
pub struct DenseHeads {
    depth: Linear,
    mask: Linear,
    point: Linear,
}

impl DenseHeads {
    pub fn init(init: &mut Init<'_>, channels: usize) -> Self {
        let depth = init.linear("head_depth", channels, 1);
        let mask = init.linear("head_mask", channels, 1);
        let point = init.linear("head_point", channels, 3);
        init.store.tensor_mut(depth.bias()).data_mut()[0] = softplus_inv(4.0);
        init.store.tensor_mut(point.bias()).data_mut()[2] = 4.0;
        Self { depth, mask, point }
    }

    /// Positive depth, `[F·H·W]`.
    pub fn depth(&self, g: &mut Graph, store: &ParamStore, fd: Var) -> Var {
        let d = self.depth.forward(g, store, fd);
        let d = g.softplus(d);
        let n = g.value(d).len();
        g.reshape(d, &[n])
    }

    /// Moving-content probability, `[F·H·W]`.
    pub fn mask(&self, g: &mut Graph, store: &ParamStore, fd: Var) -> Var {
        let m = self.mask.forward(g, store, fd);
        let m = g.sigmoid(m);
        let n = g.value(m).len();
        g.reshape(m, &[n])
    }

    /// Reference-frame points, `[F·H·W × 3]`.
    pub fn points(&self, g: &mut Graph, store: &ParamStore, fd: Var) -> Var {
        self.point.forward(g, store, fd)
    }
}

/// Query pixels in source frames of a (sub)grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Queries {
    /// View of each query in the grid being processed.
    pub views: Vec<usize>,
    /// Time index of the source frame (shared by all queries).
    pub source_time: usize,
    /// Pixel coordinates in the source frame.
    pub pixels: Vec<[f64; 2]>,
}

impl Queries {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Coarse-to-fine tracker: token correlation with soft-argmax, then a local
/// refinement on the dense features, then lifting through depth and camera.
#[derive(Debug, Clone)]
pub struct TrackHead {
    coarse: Linear,
    fine: Linear,
    pub temperature: f64,
}

/// Fine search offsets: a 9×9 lattice spanning one token either way.
fn fine_offsets(patch: usize) -> Vec<[f64; 2]> {
    let step = patch as f64 / 4.0;
    let r = 4i32;
    let mut out = Vec::with_capacity(81);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push([dx as f64 * step, dy as f64 * step]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TrackOutputs {
    /// `[T·N × 2]`, rows ordered (t, query).
    pub tracks_2d: Var,
    /// `[T·N × 3]` reference coordinates.
    pub tracks_3d: Var,
    pub coarse_2d: Var,
}

impl TrackHead {
    pub fn init(init: &mut Init<'_>, dim: usize, dense_channels: usize, feat: usize, temperature: f64) -> Self {
        Self {
            coarse: init.linear("head_track.coarse", dim, feat),
            fine: init.linear("head_track.fine", dense_channels, feat),
            temperature,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ft: Var,
        fd: Var,
        depth: Var,
        cameras: Var,
        layout: &GridLayout,
        image: (usize, usize),
        patch: usize,
        queries: &Queries,
    ) -> Result<TrackOutputs> {
        let (h, w) = image;
        let (tn, pn, nq) = (layout.times, layout.patches(), queries.len());
        if nq == 0 {
            return Err(Error::Invalid("no track queries".into()));
        }
        if queries.source_time >= tn {
            return Err(Error::Invalid(format!("source time {} outside grid", queries.source_time)));
        }
        for (v, p) in queries.views.iter().zip(&queries.pixels) {
            let inside = p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
            if *v >= layout.views || !inside {
                return Err(Error::Invalid(format!("query {p:?} in view {v} outside the source frame")));
            }
        }
        let frames = layout.frames();
        let ps = patch as f64;
        let half = (ps - 1.0) / 2.0;
        let src_frames: Arc<Vec<usize>> = Arc::new(
            queries
                .views
                .iter()
                .map(|&v| layout.frame_id(v, queries.source_time))
                .collect(),
        );
        let row_frames: Arc<Vec<usize>> = Arc::new(
            (0..tn)
                .flat_map(|t| queries.views.iter().map(move |&v| layout.frame_id(v, t)))
                .collect(),
        );

        // Coarse: correlate with every token of the target frame.
        let tok = self.coarse.forward(g, store, ft);
        let dc = g.value(tok).cols();
        let tok_map = g.reshape(tok, &[frames, layout.patch_rows, layout.patch_cols, dc]);
        let q_tok: Vec<f64> = queries
            .pixels
            .iter()
            .flat_map(|p| [(p[0] - half) / ps, (p[1] - half) / ps])
            .collect();
        let q_tok = g.input(Tensor::new(vec![nq, 2], q_tok)?);
        let qf = g.bilinear_sample(tok_map, q_tok, src_frames.clone());
        let scores = g.matmul_t(qf, tok, false, true);
        let n_tok = layout.tokens();
        let idx: Vec<usize> = row_frames
            .iter()
            .enumerate()
            .flat_map(|(r, &f)| (0..pn).map(move |p| (r % nq) * n_tok + f * pn + p))
            .collect();
        let gather = Arc::new(SparseMap::gather(nq * n_tok, &idx, &[tn * nq, pn]));
        let s = g.sparse(scores, &gather);
        let s = g.scale(s, 1.0 / (self.temperature * (dc as f64).sqrt()));
        let a = g.softmax(s);
        let centers: Vec<f64> = (0..pn)
            .flat_map(|p| {
                let (py, px) = (p / layout.patch_cols, p % layout.patch_cols);
                [px as f64 * ps + half, py as f64 * ps + half]
            })
            .collect();
        let centers = g.input(Tensor::new(vec![pn, 2], centers)?);
        let coarse = g.matmul(a, centers);

        // Fine: correlate the query's dense feature around the coarse estimate.
        let fdp = self.fine.forward(g, store, fd);
        let df = g.value(fdp).cols();
        let fd_map = g.reshape(fdp, &[frames, h, w, df]);
        let q_px: Vec<f64> = queries.pixels.iter().flat_map(|p| *p).collect();
        let q_px = g.input(Tensor::new(vec![nq, 2], q_px)?);
        let qfine = g.bilinear_sample(fd_map, q_px, src_frames);
        let offsets = fine_offsets(patch);
        let k = offsets.len();
        let rows = tn * nq;
        let rep: Vec<usize> = (0..rows * k).map(|r| r / k).collect();
        let pos = g.gather_rows(coarse, &rep);
        let off: Vec<f64> = (0..rows).flat_map(|_| offsets.iter().flatten().copied()).collect();
        let off = g.input(Tensor::new(vec![rows * k, 2], off)?);
        let pos = g.add(pos, off);
        let sample_frames: Arc<Vec<usize>> =
            Arc::new((0..rows * k).map(|r| row_frames[r / k]).collect());
        let samples = g.bilinear_sample(fd_map, pos, sample_frames);
        let q_rows: Vec<usize> = (0..rows * k).map(|r| (r / k) % nq).collect();
        let qrep = g.gather_rows(qfine, &q_rows);
        let prod = g.mul(samples, qrep);
        let corr = g.sum_last(prod);
        let corr = g.reshape(corr, &[rows, k]);
        let corr = g.scale(corr, 1.0 / (self.temperature * (df as f64).sqrt()));
        let wts = g.softmax(corr);
        let off_tab: Vec<f64> = offsets.iter().flatten().copied().collect();
        let off_tab = g.input(Tensor::new(vec![k, 2], off_tab)?);
        let delta = g.matmul(wts, off_tab);
        let fine = g.add(coarse, delta);

        // Lift to 3D with the predicted depth and camera of each target frame.
        let depth_map = g.reshape(depth, &[frames, h, w, 1]);
        let d = g.bilinear_sample(depth_map, fine, row_frames.clone());
        let d = g.reshape(d, &[rows]);
        let cam_rows = g.gather_rows(cameras, &row_frames);
        let q = g.col_slice(cam_rows, 0, 4);
        let c = g.col_slice(cam_rows, 4, 3);
        let f = g.col_slice(cam_rows, 7, 2);
        let u = g.col_slice(fine, 0, 1);
        let v = g.col_slice(fine, 1, 1);
        let u = g.add_scalar(u, -principal_point(w));
        let v = g.add_scalar(v, -principal_point(h));
        let fx = g.col_slice(f, 0, 1);
        let fx = g.scale(fx, w as f64);
        let fy = g.col_slice(f, 1, 1);
        let fy = g.scale(fy, h as f64);
        let ifx = g.unary(fx, crate::numerics::Unary::Recip);
        let ify = g.unary(fy, crate::numerics::Unary::Recip);
        let xn = g.mul(u, ifx);
        let yn = g.mul(v, ify);
        let ones = g.input(Tensor::full(&[rows, 1], 1.0));
        let ray = g.concat_cols(&[xn, yn, ones]);
        let p_cam = g.mul_col(ray, d);
        let p = g.quat_rotate(q, p_cam);
        let p = g.add(p, c);
        Ok(TrackOutputs {
            tracks_2d: fine,
            tracks_3d: p,
            coarse_2d: coarse,
        })
    }
}
