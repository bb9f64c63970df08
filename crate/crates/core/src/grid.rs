//! Adaptive view×time token grid, subgrid sampling and attention masks.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Init, Linear};
use crate::numerics::{Graph, MaskBits, ParamId, ParamStore, Tensor, Var};

/// Capture configuration of an input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CameraSetting {
    #[serde(rename = "mono-s")]
    MonoStatic,
    #[serde(rename = "mono-d")]
    MonoDynamic,
    #[serde(rename = "multi-s")]
    MultiStatic,
}

impl CameraSetting {
    pub const ALL: [CameraSetting; 3] = [
        CameraSetting::MonoStatic,
        CameraSetting::MonoDynamic,
        CameraSetting::MultiStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CameraSetting::MonoStatic => "mono-s",
            CameraSetting::MonoDynamic => "mono-d",
            CameraSetting::MultiStatic => "multi-s",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown camera setting `{s}`")))
    }

    pub fn is_monocular(self) -> bool {
        !matches!(self, CameraSetting::MultiStatic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridLayout {
    pub views: usize,
    pub times: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub setting: CameraSetting,
}

impl GridLayout {
    pub fn new(
        views: usize,
        times: usize,
        patch_rows: usize,
        patch_cols: usize,
        setting: CameraSetting,
    ) -> Result<Self> {
        if views == 0 || times == 0 || patch_rows == 0 || patch_cols == 0 {
            return Err(Error::Layout(format!(
                "V={views} T={times} P={patch_rows}x{patch_cols} must all be >= 1"
            )));
        }
        if setting.is_monocular() && views != 1 {
            return Err(Error::Layout(format!(
                "{} requires a single view, got {views}",
                setting.name()
            )));
        }
        Ok(Self {
            views,
            times,
            patch_rows,
            patch_cols,
            setting,
        })
    }

    /// Layout with `patches` tokens per frame arranged as a single row.
    pub fn flat(views: usize, times: usize, patches: usize, setting: CameraSetting) -> Result<Self> {
        Self::new(views, times, 1, patches, setting)
    }

    pub fn patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn frames(&self) -> usize {
        self.views * self.times
    }

    pub fn tokens(&self) -> usize {
        self.frames() * self.patches()
    }

    /// Flat token id of cell `(v, t)`, patch `p`.
    pub fn token_id(&self, v: usize, t: usize, p: usize) -> usize {
        debug_assert!(v < self.views && t < self.times && p < self.patches());
        (v * self.times + t) * self.patches() + p
    }

    pub fn cell(&self, id: usize) -> (usize, usize, usize) {
        let p = id % self.patches();
        let f = id / self.patches();
        (f / self.times, f % self.times, p)
    }

    pub fn frame_id(&self, v: usize, t: usize) -> usize {
        v * self.times + t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Spatial,
    Temporal,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Spatial => "spatial",
            MaskKind::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(MaskKind::Spatial),
            "temporal" => Ok(MaskKind::Temporal),
            _ => Err(Error::Invalid(format!("unknown mask kind `{s}`"))),
        }
    }
}

/// Dense token-pair admissibility matrix for one fusion module.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub layout: GridLayout,
    pub kind: MaskKind,
    /// Temporal window size; `None` for spatial masks.
    pub window: Option<usize>,
    pub bits: MaskBits,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.layout.tokens()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n() + j]
    }

    fn from_predicate(
        layout: GridLayout,
        kind: MaskKind,
        window: Option<usize>,
        pred: impl Fn((usize, usize, usize), (usize, usize, usize)) -> bool,
    ) -> Self {
        let n = layout.tokens();
        let cells: Vec<_> = (0..n).map(|i| layout.cell(i)).collect();
        let mut bits = Vec::with_capacity(n * n);
        for a in &cells {
            for b in &cells {
                bits.push(pred(*a, *b));
            }
        }
        Self {
            layout,
            kind,
            window,
            bits: Arc::new(bits),
        }
    }

    /// Mask admitting every pair; used by the mask ablations.
    pub fn all_true(layout: GridLayout, kind: MaskKind, window: Option<usize>) -> Self {
        let n = layout.tokens();
        Self {
            layout,
            kind,
            window,
            bits: Arc::new(vec![true; n * n]),
        }
    }

    /// Text dump: a `V T P S setting kind` header, then one `0`/`1` row per token.
    pub fn to_text(&self, window: usize) -> String {
        let l = &self.layout;
        let mut s = format!(
            "{} {} {} {} {} {}\n",
            l.views,
            l.times,
            l.patches(),
            window,
            l.setting.name(),
            self.kind.name()
        );
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Same time step, any view, any patch.
pub fn build_spatial_mask(layout: GridLayout) -> AttentionMask {
    AttentionMask::from_predicate(layout, MaskKind::Spatial, None, |(_, t, _), (_, t2, _)| {
        t == t2
    })
}

/// Same view and patch position, times within `⌊S/2⌋` of each other.
pub fn build_temporal_mask(layout: GridLayout, window: usize) -> Result<AttentionMask> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Invalid(format!(
            "temporal window must be odd and >= 1, got {window}"
        )));
    }
    let half = window / 2;
    Ok(AttentionMask::from_predicate(
        layout,
        MaskKind::Temporal,
        Some(window),
        move |(v, t, p), (v2, t2, p2)| v == v2 && p == p2 && t.abs_diff(t2) <= half,
    ))
}

/// Restriction of a spatial mask to pairs inside one frame.
pub fn intra_frame_mask(spatial: &AttentionMask) -> AttentionMask {
    let layout = spatial.layout;
    let n = layout.tokens();
    let p = layout.patches();
    let bits = (0..n * n)
        .map(|k| spatial.bits[k] && (k / n) / p == (k % n) / p)
        .collect();
    AttentionMask {
        layout,
        kind: MaskKind::Spatial,
        window: None,
        bits: Arc::new(bits),
    }
}

/// Grid of patch tokens `t^I` with rows ordered by `(v, t, p)`.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub layout: GridLayout,
    /// `[V·T·P × d]`.
    pub tokens: Var,
}

/// Learnable patch embedding plus view and time identifier tables.
#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub patch: usize,
    pub dim: usize,
    pub proj: Linear,
    pub view_table: ParamId,
    pub time_table: ParamId,
    pub max_views: usize,
    pub max_times: usize,
}

impl Encoder {
    pub fn init(
        init: &mut Init<'_>,
        patch: usize,
        channels: usize,
        dim: usize,
        max_views: usize,
        max_times: usize,
    ) -> Self {
        Self {
            patch,
            dim,
            proj: init.linear("encoder.patch_proj", patch * patch * channels, dim),
            view_table: init.normal("encoder.view_embed", &[max_views, dim], 0.1),
            time_table: init.normal("encoder.time_embed", &[max_times, dim], 0.1),
            max_views,
            max_times,
        }
    }

    /// Per-token view identifiers `t^V`, `[V·T·P × d]`.
    pub fn view_ids(&self, g: &mut Graph, store: &ParamStore, layout: &GridLayout) -> Var {
        let rows: Vec<usize> = (0..layout.tokens()).map(|i| layout.cell(i).0).collect();
        let table = g.param(store, self.view_table);
        g.gather_rows(table, &rows)
    }

    /// Per-token time identifiers `t^T`, `[V·T·P × d]`.
    pub fn time_ids(&self, g: &mut Graph, store: &ParamStore, layout: &GridLayout) -> Var {
        let rows: Vec<usize> = (0..layout.tokens()).map(|i| layout.cell(i).1).collect();
        let table = g.param(store, self.time_table);
        g.gather_rows(table, &rows)
    }
}

/// Cuts `[V, T, H, W, C]` frames into row-major patches, one row per token.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<(Tensor, usize, usize)> {
    let s = frames.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("frames must be [V,T,H,W,C], got {s:?}")));
    }
    let (v, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Layout(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (pr, pc) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut out = Vec::with_capacity(v * t * pr * pc * width);
    let d = frames.data();
    for f in 0..v * t {
        for py in 0..pr {
            for px in 0..pc {
                for y in 0..patch {
                    let row = f * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&d[row * c..(row + patch) * c]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![v * t * pr * pc, width], out)?, pr, pc))
}

/// Embeds every frame patch and arranges the tokens on the view×time grid.
pub fn build_grid(
    g: &mut Graph,
    store: &ParamStore,
    enc: &Encoder,
    frames: &Tensor,
    setting: CameraSetting,
) -> Result<TokenGrid> {
    let s = frames.shape();
    if s.len() == 5 && (s[0] > enc.max_views || s[1] > enc.max_times) {
        return Err(Error::Layout(format!(
            "grid {}x{} exceeds embedding capacity {}x{}",
            s[0], s[1], enc.max_views, enc.max_times
        )));
    }
    let (patches, pr, pc) = patchify(frames, enc.patch)?;
    let layout = GridLayout::new(s[0], s[1], pr, pc, setting)?;
    let x = g.input(patches);
    let tokens = enc.proj.forward(g, store, x);
    Ok(TokenGrid { layout, tokens })
}

/// Bounds for training-time subgrid sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePolicy {
    pub min_views: usize,
    pub max_views: usize,
    pub min_times: usize,
    pub max_times: usize,
}

impl SamplePolicy {
    pub fn full(layout: &GridLayout) -> Self {
        Self {
            min_views: layout.views,
            max_views: layout.views,
            min_times: layout.times,
            max_times: layout.times,
        }
    }

    /// Bounds clipped to a concrete grid.
    pub fn clipped(&self, layout: &GridLayout) -> Result<Self> {
        let p = Self {
            min_views: self.min_views.min(layout.views),
            max_views: self.max_views.min(layout.views),
            min_times: self.min_times.min(layout.times),
            max_times: self.max_times.min(layout.times),
        };
        if p.min_views == 0 || p.min_times == 0 || p.min_views > p.max_views || p.min_times > p.max_times {
            return Err(Error::Invalid(format!("empty sample policy {self:?}")));
        }
        Ok(p)
    }

    pub fn sample(&self, layout: &GridLayout, rng: &mut impl Rng) -> Result<Selection> {
        let p = self.clipped(layout)?;
        let nv = rng.random_range(p.min_views..=p.max_views);
        let mut views = sample_indices(rng, layout.views, nv).into_vec();
        views.sort_unstable();
        let len = rng.random_range(p.min_times..=p.max_times);
        let t0 = rng.random_range(0..=layout.times - len);
        Selection::new(layout, views, t0, len)
    }
}

/// A view subset crossed with a contiguous time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub views: Vec<usize>,
    pub t0: usize,
    pub len: usize,
}

impl Selection {
    pub fn new(layout: &GridLayout, views: Vec<usize>, t0: usize, len: usize) -> Result<Self> {
        if views.is_empty() || len == 0 {
            return Err(Error::Invalid("empty subgrid selection".into()));
        }
        if views.iter().any(|&v| v >= layout.views) || t0 + len > layout.times {
            return Err(Error::Invalid(format!(
                "selection {views:?} x [{t0}, {}) outside {}x{} grid",
                t0 + len,
                layout.views,
                layout.times
            )));
        }
        Ok(Self { views, t0, len })
    }

    pub fn full(layout: &GridLayout) -> Self {
        Self {
            views: (0..layout.views).collect(),
            t0: 0,
            len: layout.times,
        }
    }

    pub fn is_full(&self, layout: &GridLayout) -> bool {
        *self == Self::full(layout)
    }

    /// Source `(v, t)` of every selected frame, in the new grid's order.
    pub fn frames(&self) -> Vec<(usize, usize)> {
        self.views
            .iter()
            .flat_map(|&v| (self.t0..self.t0 + self.len).map(move |t| (v, t)))
            .collect()
    }

    pub fn layout(&self, src: &GridLayout) -> Result<GridLayout> {
        let setting = if self.views.len() == 1 && !src.setting.is_monocular() {
            // A single sampled view of a multi-view rig is a monocular sequence.
            CameraSetting::MonoDynamic
        } else {
            src.setting
        };
        GridLayout::new(self.views.len(), self.len, src.patch_rows, src.patch_cols, setting)
    }
}

/// Copies the selected cells into a new, densely indexed grid.
pub fn select_subgrid(g: &mut Graph, grid: &TokenGrid, sel: &Selection) -> Result<TokenGrid> {
    let layout = sel.layout(&grid.layout)?;
    let p = grid.layout.patches();
    let rows: Vec<usize> = sel
        .frames()
        .into_iter()
        .flat_map(|(v, t)| (0..p).map(move |k| grid.layout.token_id(v, t, k)))
        .collect();
    let tokens = g.gather_rows(grid.tokens, &rows);
    Ok(TokenGrid { layout, tokens })
}

pub fn sample_subgrid(
    g: &mut Graph,
    grid: &TokenGrid,
    policy: &SamplePolicy,
    rng: &mut impl Rng,
) -> Result<(TokenGrid, Selection)> {
    let sel = policy.sample(&grid.layout, rng)?;
    Ok((select_subgrid(g, grid, &sel)?, sel))
}

/// Selects frames `[V, T, H, W, C]` to match a selection.
pub fn select_frames(frames: &Tensor, sel: &Selection) -> Result<Tensor> {
    let s = frames.shape();
    let per_frame: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(sel.views.len() * sel.len * per_frame);
    for (v, t) in sel.frames() {
        let f = v * s[1] + t;
        out.extend_from_slice(&frames.data()[f * per_frame..(f + 1) * per_frame]);
    }
    let mut shape = s.to_vec();
    shape[0] = sel.views.len();
    shape[1] = sel.len;
    Tensor::new(shape, out)
}

/// Human-readable summary used in logs.
pub fn describe(layout: &GridLayout) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{}x{} grid, {} patches ({}x{}), {}",
        layout.views,
        layout.times,
        layout.patches(),
        layout.patch_rows,
        layout.patch_cols,
        layout.setting.name()
    );
    s
}
