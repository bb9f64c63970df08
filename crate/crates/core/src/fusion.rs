//! Cross-view global fusion and cross-time local fusion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{intra_frame_mask, AttentionMask, MaskKind};
use crate::numerics::nn::{
    gru_step, multi_head_attention, AttentionWeights, FeedForward, GruWeights, Init, LayerNorm,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Number of stacked cross-view blocks.
    pub layers: usize,
    /// Temporal window size, odd.
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    /// Attend only to the last hidden state of each window.
    pub ctlf_single_kv: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            window: 3,
            dim: 64,
            heads: 4,
            ctlf_single_kv: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("fusion layers must be >= 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct CvgfBlock {
    ln_intra: LayerNorm,
    intra: AttentionWeights,
    ln_inter: LayerNorm,
    inter: AttentionWeights,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Stack of pre-norm blocks: intra-frame attention, inter-frame attention, MLP.
#[derive(Debug, Clone)]
pub struct Cvgf {
    blocks: Vec<CvgfBlock>,
    ln_out: LayerNorm,
    heads: usize,
}

impl Cvgf {
    pub fn init(init: &mut Init<'_>, cfg: &FusionConfig) -> Self {
        let d = cfg.dim;
        let blocks = (0..cfg.layers)
            .map(|l| CvgfBlock {
                ln_intra: init.layer_norm(&format!("cvgf.{l}.ln_intra"), d),
                intra: init.attention(&format!("cvgf.{l}.intra"), d),
                ln_inter: init.layer_norm(&format!("cvgf.{l}.ln_inter"), d),
                inter: init.attention(&format!("cvgf.{l}.inter"), d),
                ln_ff: init.layer_norm(&format!("cvgf.{l}.ln_ff"), d),
                ff: init.feed_forward(&format!("cvgf.{l}.ff"), d, 4),
            })
            .collect();
        Self {
            blocks,
            ln_out: init.layer_norm("cvgf.ln_out", d),
            heads: cfg.heads,
        }
    }

    /// `x` holds patch tokens with view identifiers already added, `[n × d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        if mask.kind != MaskKind::Spatial {
            return Err(Error::Invalid("cross-view fusion needs a spatial mask".into()));
        }
        if mask.n() != g.value(x).rows() {
            return Err(Error::Shape(format!(
                "mask covers {} tokens, grid has {}",
                mask.n(),
                g.value(x).rows()
            )));
        }
        let intra = intra_frame_mask(mask).bits;
        let mut x = x;
        for b in &self.blocks {
            let h = b.ln_intra.forward(g, store, x);
            let a = multi_head_attention(g, store, &b.intra, h, h, &intra, self.heads)?;
            x = g.add(x, a);
            let h = b.ln_inter.forward(g, store, x);
            let a = multi_head_attention(g, store, &b.inter, h, h, &mask.bits, self.heads)?;
            x = g.add(x, a);
            let h = b.ln_ff.forward(g, store, x);
            let f = b.ff.forward(g, store, h);
            x = g.add(x, f);
        }
        Ok(self.ln_out.forward(g, store, x))
    }
}

/// Per-tube recurrent window encoder followed by query attention over the
/// window's hidden states.
#[derive(Debug, Clone)]
pub struct Ctlf {
    ln_in: LayerNorm,
    gru: GruWeights,
    ln_q: LayerNorm,
    attn: AttentionWeights,
    ln_ff: LayerNorm,
    ff: FeedForward,
    ln_out: LayerNorm,
    heads: usize,
    single_kv: bool,
}

impl Ctlf {
    pub fn init(init: &mut Init<'_>, cfg: &FusionConfig) -> Self {
        let d = cfg.dim;
        Self {
            ln_in: init.layer_norm("ctlf.ln_in", d),
            gru: init.gru("ctlf.gru", d, d),
            ln_q: init.layer_norm("ctlf.ln_q", d),
            attn: init.attention("ctlf.attn", d),
            ln_ff: init.layer_norm("ctlf.ln_ff", d),
            ff: init.feed_forward("ctlf.ff", d, 4),
            ln_out: init.layer_norm("ctlf.ln_out", d),
            heads: cfg.heads,
            single_kv: cfg.ctlf_single_kv,
        }
    }

    /// `x` holds patch tokens with time identifiers already added, `[n × d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        if mask.kind != MaskKind::Temporal {
            return Err(Error::Invalid("cross-time fusion needs a temporal mask".into()));
        }
        let window = mask
            .window
            .ok_or_else(|| Error::Invalid("temporal mask without window size".into()))?;
        let layout = mask.layout;
        let (d, n) = (g.value(x).cols(), g.value(x).rows());
        if n != layout.tokens() {
            return Err(Error::Shape(format!("mask covers {} tokens, grid has {n}", layout.tokens())));
        }
        let (tn, pn) = (layout.times, layout.patches());
        let tubes = layout.views * pn;
        let tube_rows = |t: usize| -> Vec<usize> {
            (0..layout.views)
                .flat_map(|v| (0..pn).map(move |p| layout.token_id(v, t, p)))
                .collect()
        };

        let xn = self.ln_in.forward(g, store, x);
        let qn = self.ln_q.forward(g, store, x);
        let half = window / 2;
        let mut per_center = Vec::with_capacity(tn);
        for t in 0..tn {
            let (lo, hi) = (t.saturating_sub(half), (t + half).min(tn - 1));
            let mut h = g.input(Tensor::zeros(&[tubes, d]));
            let mut states = Vec::with_capacity(hi - lo + 1);
            for j in lo..=hi {
                let xj = g.gather_rows(xn, &tube_rows(j));
                h = gru_step(g, store, &self.gru, xj, h)?;
                states.push(h);
            }
            let kv = if self.single_kv {
                h
            } else {
                g.concat_rows(&states)
            };
            let len = if self.single_kv { 1 } else { states.len() };
            // Query row i reads the hidden states of its own tube only.
            let bits: Vec<bool> = (0..tubes)
                .flat_map(|i| (0..len * tubes).map(move |k| k % tubes == i))
                .collect();
            let q = g.gather_rows(qn, &tube_rows(t));
            let a = multi_head_attention(g, store, &self.attn, q, kv, &Arc::new(bits), self.heads)?;
            per_center.push(a);
        }
        let stacked = g.concat_rows(&per_center);
        // Rows are ordered (t, v, p); restore the grid's (v, t, p) order.
        let order: Vec<usize> = (0..n)
            .map(|id| {
                let (v, t, p) = layout.cell(id);
                t * tubes + v * pn + p
            })
            .collect();
        let a = g.gather_rows(stacked, &order);
        let y = g.add(x, a);
        let h = self.ln_ff.forward(g, store, y);
        let f = self.ff.forward(g, store, h);
        let y = g.add(y, f);
        Ok(self.ln_out.forward(g, store, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_spatial_mask, build_temporal_mask, CameraSetting, GridLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &FusionConfig) -> (ParamStore, Cvgf, Ctlf) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let cv = Cvgf::init(&mut init, cfg);
        let ct = Ctlf::init(&mut init, cfg);
        (store, cv, ct)
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_are_preserved() {
        let cfg = FusionConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ..FusionConfig::default()
        };
        let (store, cv, ct) = setup(&cfg);
        let layout = GridLayout::flat(2, 3, 4, CameraSetting::MultiStatic).unwrap();
        let mut g = Graph::new();
        let x = g.input(tokens(24, 8, 2));
        let fs = cv.forward(&mut g, &store, x, &build_spatial_mask(layout)).unwrap();
        let ft = ct
            .forward(&mut g, &store, x, &build_temporal_mask(layout, 3).unwrap())
            .unwrap();
        assert_eq!(g.shape(fs), &[24, 8]);
        assert_eq!(g.shape(ft), &[24, 8]);
        assert!(g.ensure_finite().is_ok());
    }

    #[test]
    fn wrong_mask_kind_is_rejected() {
        let cfg = FusionConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ..FusionConfig::default()
        };
        let (store, cv, ct) = setup(&cfg);
        let layout = GridLayout::flat(1, 2, 1, CameraSetting::MonoDynamic).unwrap();
        let mut g = Graph::new();
        let x = g.input(tokens(2, 8, 3));
        assert!(cv.forward(&mut g, &store, x, &build_temporal_mask(layout, 1).unwrap()).is_err());
        assert!(ct.forward(&mut g, &store, x, &build_spatial_mask(layout)).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(FusionConfig { window: 2, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { heads: 3, ..FusionConfig::default() }.validate().is_err());
        assert!(FusionConfig { layers: 0, ..FusionConfig::default() }.validate().is_err());
    }
}
