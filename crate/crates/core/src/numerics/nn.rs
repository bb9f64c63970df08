//! Learnable building blocks shared by the fusion modules and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, MaskBits, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        let data = (0..n).map(|_| self.rng.sample(dist)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
            b: Some(self.constant(&format!("{name}.b"), &[fan_out], 0.0)),
        }
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
            b: None,
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: self.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn attention(&mut self, name: &str, dim: usize) -> AttentionWeights {
        AttentionWeights {
            q: self.linear(&format!("{name}.q"), dim, dim),
            // A key bias shifts every score of a row equally and cancels in the softmax.
            k: self.linear_no_bias(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
        }
    }

    pub fn gru(&mut self, name: &str, input: usize, hidden: usize) -> GruWeights {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruWeights {
            w: self.uniform(&format!("{name}.w"), &[input, 3 * hidden], bound),
            u_zr: self.uniform(&format!("{name}.u_zr"), &[hidden, 2 * hidden], bound),
            u_h: self.uniform(&format!("{name}.u_h"), &[hidden, hidden], bound),
            b: self.constant(&format!("{name}.b"), &[3 * hidden], 0.0),
            hidden,
        }
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, mult: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), dim, dim * mult),
            down: self.linear(&format!("{name}.down"), dim * mult, dim),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn bias(&self) -> ParamId {
        self.b.expect("layer has a bias")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer SiLU MLP.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Masked multi-head attention of `queries` over `keys_values`.
///
/// Query row `i` may only read key/value rows `j` with `mask[i·nk + j]`;
/// scores are scaled by `1/√(d/heads)`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    w: &AttentionWeights,
    queries: Var,
    keys_values: Var,
    mask: &MaskBits,
    heads: usize,
) -> Result<Var> {
    let (nq, d) = (g.value(queries).rows(), g.value(queries).cols());
    let (nk, dk) = (g.value(keys_values).rows(), g.value(keys_values).cols());
    if d != dk {
        return Err(Error::Shape(format!("query width {d} != key width {dk}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    if mask.len() != nq * nk {
        return Err(Error::Shape(format!(
            "mask has {} entries, expected {nq}x{nk}",
            mask.len()
        )));
    }
    let dh = d / heads;
    let q = w.q.forward(g, store, queries);
    let k = w.k.forward(g, store, keys_values);
    let v = w.v.forward(g, store, keys_values);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.col_slice(q, h * dh, dh),
                g.col_slice(k, h * dh, dh),
                g.col_slice(v, h * dh, dh),
            )
        };
        let s = g.matmul_t(qh, kh, false, true);
        let s = g.scale(s, scale);
        let a = g.masked_softmax(s, mask)?;
        outs.push(g.matmul(a, vh));
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Ok(w.o.forward(g, store, o))
}

#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    /// Input weights for the update, reset and candidate gates, `[in × 3h]`.
    pub w: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// One GRU step over a batch of rows:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
pub fn gru_step(
    g: &mut Graph,
    store: &ParamStore,
    w: &GruWeights,
    x: Var,
    h: Var,
) -> Result<Var> {
    for (name, v) in [("input", x), ("hidden state", h)] {
        if !g.value(v).is_finite() {
            return Err(Error::NonFinite(format!("gru {name}")));
        }
    }
    let hd = w.hidden;
    if g.value(h).cols() != hd || g.value(x).rows() != g.value(h).rows() {
        return Err(Error::Shape(format!(
            "gru: x {:?}, h {:?}, hidden {hd}",
            g.shape(x),
            g.shape(h)
        )));
    }
    let wx = g.param(store, w.w);
    let b = g.param(store, w.b);
    let xw = g.matmul(x, wx);
    let xw = g.add_row(xw, b);
    let u_zr = g.param(store, w.u_zr);
    let hu = g.matmul(h, u_zr);
    let zx = g.col_slice(xw, 0, hd);
    let zh = g.col_slice(hu, 0, hd);
    let z = g.add(zx, zh);
    let z = g.sigmoid(z);
    let rx = g.col_slice(xw, hd, hd);
    let rh = g.col_slice(hu, hd, hd);
    let r = g.add(rx, rh);
    let r = g.sigmoid(r);
    let rh = g.mul(r, h);
    let u_h = g.param(store, w.u_h);
    let cand = g.matmul(rh, u_h);
    let cx = g.col_slice(xw, 2 * hd, hd);
    let cand = g.add(cx, cand);
    let cand = g.tanh(cand);
    let neg_z = g.scale(z, -1.0);
    let keep = g.add_scalar(neg_z, 1.0);
    let kept = g.mul(keep, h);
    let written = g.mul(z, cand);
    Ok(g.add(kept, written))
}
