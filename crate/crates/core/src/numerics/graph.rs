//! Reverse-mode differentiation over a tape of tensor primitives.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted;
//! [`Graph::backward`] walks it once in reverse and accumulates adjoints.
//! Parameters enter through [`Graph::param`], which consults the store's
//! freeze flags: frozen parameters become constants and never receive
//! gradients, which also prunes the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::linalg::gemm;
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Softplus,
    Silu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
    Recip,
    Huber(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Huber(d) => {
                if x.abs() <= d {
                    0.5 * x * x
                } else {
                    d * (x.abs() - 0.5 * d)
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Huber(d) => x.clamp(-d, d),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Neumaier summation; keeps large reductions accurate to a few ulps.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fixed sparse linear map: `out[i] = Σ w · input[j]` over the entries of row `i`.
///
/// Gathers, pooling, fixed interpolation and zero-padded im2col windows are all
/// instances of this map.
#[derive(Debug, Clone)]
pub struct SparseMap {
    out_shape: Vec<usize>,
    in_len: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_len: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            in_len,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// `out[i] = input[indices[i]]`.
    pub fn gather(in_len: usize, indices: &[usize], out_shape: &[usize]) -> Self {
        let mut b = Self::builder(in_len);
        for &i in indices {
            b.push(i, 1.0);
            b.end_row();
        }
        b.finish(out_shape)
    }

    /// Gathers whole rows of a `[rows × cols]` input.
    pub fn gather_rows(in_rows: usize, cols: usize, rows: &[usize]) -> Self {
        let mut b = Self::builder(in_rows * cols);
        for &r in rows {
            for c in 0..cols {
                b.push(r * cols + c, 1.0);
                b.end_row();
            }
        }
        b.finish(&[rows.len(), cols])
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len()];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for e in self.offsets[i]..self.offsets[i + 1] {
                acc += self.weight[e] * input[self.index[e]];
            }
            *o = acc;
        }
        out
    }

    fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for e in self.offsets[i]..self.offsets[i + 1] {
                grad_in[self.index[e]] += self.weight[e] * g;
            }
        }
    }
}

pub struct SparseMapBuilder {
    in_len: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMapBuilder {
    pub fn push(&mut self, index: usize, weight: f64) {
        debug_assert!(index < self.in_len);
        self.index.push(index);
        self.weight.push(weight);
    }

    pub fn end_row(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn finish(self, out_shape: &[usize]) -> SparseMap {
        let n = self.offsets.len() - 1;
        assert_eq!(
            n,
            out_shape.iter().product::<usize>(),
            "sparse map row count does not match output shape"
        );
        SparseMap {
            out_shape: out_shape.to_vec(),
            in_len: self.in_len,
            offsets: self.offsets,
            index: self.index,
            weight: self.weight,
        }
    }
}

/// Row-major boolean admissibility matrix shared by softmax nodes.
pub type MaskBits = Arc<Vec<bool>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sparse(Var, Arc<SparseMap>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ColSlice {
        a: Var,
        start: usize,
    },
    Sum(Var),
    SumLast(Var),
    Reshape(Var),
    Bilinear {
        map: Var,
        pos: Var,
        frames: Arc<Vec<usize>>,
        h: usize,
        w: usize,
    },
    QuatRotate {
        q: Var,
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Adjoint of an arbitrary node (None when it did not require grad).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads[v.0].as_deref()
    }

    /// Accumulated gradient of a parameter, summed over every use.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

/// Tape of recorded tensor primitives.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(usize, ParamId)>,
    non_finite: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Errors if any recorded op produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{:?}", std::mem::discriminant(&op)).replace(
                "Discriminant",
                &format!("op#{}", self.nodes.len()),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient; used to probe sensitivities of inputs.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Parameter leaf. Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.tensor(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.param_nodes.push((v.0, id));
        }
        v
    }

    /// `op(a) · op(b)` for 2-D operands, with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsa, csa) = if ta { (1, sa[1]) } else { (sa[1], 1) };
            let (rsb, csb) = if tb { (1, sb[1]) } else { (sb[1], 1) };
            gemm(m, k, n, av, rsa, csa, bv, rsb, csb, &mut out, n, 1);
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[r, c] + row[c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let cols = self.value(a).cols();
        assert_eq!(self.value(row).len(), cols, "add_row width mismatch");
        let rv = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv[i % cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// `a[r, c] * row[c]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let cols = self.value(a).cols();
        assert_eq!(self.value(row).len(), cols, "mul_row width mismatch");
        let rv = self.value(row).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * rv[i % cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, row]);
        self.push(t, Op::MulRow(a, row), rg)
    }

    /// `a[r, c] * col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let cols = self.value(a).cols();
        let rows = self.value(a).rows();
        assert_eq!(self.value(col).len(), rows, "mul_col height mismatch");
        let cv = self.value(col).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * cv[i / cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, col]);
        self.push(t, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f.apply(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Unary(a, f), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None).expect("unmasked softmax cannot degenerate")
    }

    /// Row-wise softmax where inadmissible entries get an additive −∞ score and
    /// hence exactly zero weight. A row with no admissible entry is an error.
    pub fn masked_softmax(&mut self, a: Var, mask: &MaskBits) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, scores have {}",
                mask.len(),
                self.value(a).len()
            )));
        }
        self.softmax_impl(a, Some(mask.clone()))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<MaskBits>) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (r, (row, orow)) in ta
            .data()
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .enumerate()
        {
            let shifted: Vec<f64> = match &mask {
                Some(m) => row
                    .iter()
                    .zip(&m[r * cols..(r + 1) * cols])
                    .map(|(&x, &ok)| if ok { x } else { f64::NEG_INFINITY })
                    .collect(),
                None => row.to_vec(),
            };
            let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttentionRow { row: r });
            }
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(&shifted) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let ta = self.value(a);
        let cols = ta.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == cols && b.len() == cols, "layer_norm width mismatch");
        let rows = ta.rows();
        let mut xhat = vec![0.0; ta.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; ta.len()];
        for r in 0..rows {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.rg(&[a, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn sparse(&mut self, a: Var, map: &Arc<SparseMap>) -> Var {
        assert_eq!(
            self.value(a).len(),
            map.in_len,
            "sparse map input length mismatch"
        );
        let data = map.apply(self.value(a).data());
        let t = Tensor::new(map.out_shape.clone(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::Sparse(a, map.clone()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let map = Arc::new(SparseMap::gather_rows(r, c, rows));
        self.sparse(a, &map)
    }

    /// Concatenates 2-D operands with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], out).unwrap();
        let rg = self.rg(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks operands with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let t = Tensor::new(vec![rows, cols], out).unwrap();
        let rg = self.rg(parts);
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..start + len` of a 2-D operand.
    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        assert!(start + len <= cols, "col_slice out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::ColSlice { a, start }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data());
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let data: Vec<f64> = ta.data().chunks(cols).map(compensated_sum).collect();
        let mut shape = ta.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, Op::SumLast(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Bilinear lookup into a stack of channel-last maps `[F × H × W × C]`.
    ///
    /// Sample `i` reads frame `frames[i]` at pixel coordinates `pos[i] = (x, y)`
    /// with pixel centers on integers; coordinates are clamped to the image.
    /// Differentiable in both the map and the positions.
    pub fn bilinear_sample(&mut self, map: Var, pos: Var, frames: Arc<Vec<usize>>) -> Var {
        let shape = self.shape(map).to_vec();
        assert_eq!(shape.len(), 4, "bilinear map must be [F, H, W, C]");
        let (h, w, c) = (shape[1], shape[2], shape[3]);
        let n = frames.len();
        assert_eq!(self.value(pos).len(), 2 * n, "bilinear positions must be [N, 2]");
        let m = self.value(map).data();
        let p = self.value(pos).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let taps = bilinear_taps(p[2 * i], p[2 * i + 1], h, w);
            let base = frames[i] * h * w;
            for (pix, wt) in taps.iter() {
                let src = &m[(base + pix) * c..(base + pix + 1) * c];
                for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
        let t = Tensor::new(vec![n, c], out).unwrap();
        let rg = self.rg(&[map, pos]);
        self.push(
            t,
            Op::Bilinear {
                map,
                pos,
                frames,
                h,
                w,
            },
            rg,
        )
    }

    /// Rotates rows of `x: [M × 3]` by quaternions `q: [M × 4]` (w, x, y, z).
    ///
    /// Uses the polynomial form `(w² − u·u)v + 2(u·v)u + 2w(u × v)`, which is a
    /// rotation for unit `q`.
    pub fn quat_rotate(&mut self, q: Var, x: Var) -> Var {
        let (qv, xv) = (self.value(q).data(), self.value(x).data());
        let m = xv.len() / 3;
        assert_eq!(qv.len(), 4 * m, "quat_rotate row mismatch");
        let mut out = vec![0.0; 3 * m];
        for i in 0..m {
            let r = quat_apply(&qv[4 * i..4 * i + 4], &xv[3 * i..3 * i + 3]);
            out[3 * i..3 * i + 3].copy_from_slice(&r);
        }
        let t = Tensor::new(vec![m, 3], out).unwrap();
        let rg = self.rg(&[q, x]);
        self.push(t, Op::QuatRotate { q, x }, rg)
    }

    /// Accumulates adjoints of the scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for &(node, id) in &self.param_nodes {
            let Some(g) = grads[node].as_ref() else {
                continue;
            };
            match params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => params.push((id, g.clone())),
            }
        }
        Gradients {
            node_grads: grads,
            params,
        }
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (rsa, csa) = if *ta { (1, sa[1]) } else { (sa[1], 1) };
                let (rsb, csb) = if *tb { (1, sb[1]) } else { (sb[1], 1) };
                if self.nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, *a, av.len());
                    // dA = dC · op(B)^T, written back through A's own layout.
                    let (rsc, csc) = if *ta { (1, m) } else { (k, 1) };
                    gemm(m, n, k, gout, n, 1, bv, csb, rsb, ga, rsc, csc);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, *b, bv.len());
                    let (rsc, csc) = if *tb { (1, k) } else { (n, 1) };
                    gemm(k, m, n, av, csa, rsa, gout, n, 1, gb, rsc, csc);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |g| add_into(g, gout));
                accumulate(grads, self, *b, |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |g| add_into(g, gout));
                accumulate(grads, self, *b, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, self, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * bv[j];
                    }
                });
                accumulate(grads, self, *b, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                accumulate(grads, self, *a, |g| add_into(g, gout));
                accumulate(grads, self, *row, |g| {
                    let c = g.len();
                    for (j, x) in gout.iter().enumerate() {
                        g[j % c] += x;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                let c = rv.len();
                accumulate(grads, self, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * rv[j % c];
                    }
                });
                accumulate(grads, self, *row, |g| {
                    for j in 0..gout.len() {
                        g[j % c] += gout[j] * av[j];
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                let c = out.cols();
                accumulate(grads, self, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * cv[j / c];
                    }
                });
                accumulate(grads, self, *col, |g| {
                    for j in 0..gout.len() {
                        g[j / c] += gout[j] * av[j];
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(grads, self, *a, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(grads, self, *a, |g| add_into(g, gout));
            }
            Op::Unary(a, f) => {
                let av = self.value(*a).data();
                let ov = out.data();
                accumulate(grads, self, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * f.derivative(av[j], ov[j]);
                    }
                });
            }
            Op::Softmax { a } => {
                let cols = out.cols();
                let y = out.data();
                accumulate(grads, self, *a, |g| {
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            g[r * cols + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = out.cols();
                let gv = self.value(*gamma).data();
                accumulate(grads, self, *a, |g| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let dxh: Vec<f64> = gout[range.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(d, gm)| d * gm)
                            .collect();
                        let xh = &xhat[range];
                        let m1 = dxh.iter().sum::<f64>() / cols as f64;
                        let m2 =
                            dxh.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            g[r * cols + c] += rs * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                });
                accumulate(grads, self, *gamma, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % cols] += d * xhat[j];
                    }
                });
                accumulate(grads, self, *beta, |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % cols] += d;
                    }
                });
            }
            Op::Sparse(a, map) => {
                accumulate(grads, self, *a, |g| map.apply_transpose(gout, g));
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(grads, self, *p, |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += gout[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, self, *p, |g| add_into(g, &gout[off..off + len]));
                    off += len;
                }
            }
            Op::ColSlice { a, start } => {
                let cols = self.value(*a).cols();
                let len = out.cols();
                accumulate(grads, self, *a, |g| {
                    for r in 0..out.rows() {
                        for c in 0..len {
                            g[r * cols + start + c] += gout[r * len + c];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                accumulate(grads, self, *a, |g| g.iter_mut().for_each(|x| *x += gout[0]));
            }
            Op::SumLast(a) => {
                let cols = self.value(*a).cols();
                accumulate(grads, self, *a, |g| {
                    for (j, x) in g.iter_mut().enumerate() {
                        *x += gout[j / cols];
                    }
                });
            }
            Op::Bilinear {
                map,
                pos,
                frames,
                h,
                w,
            } => {
                let (h, w) = (*h, *w);
                let c = out.cols();
                let mv = self.value(*map).data();
                let pv = self.value(*pos).data();
                accumulate(grads, self, *map, |g| {
                    for (i, &f) in frames.iter().enumerate() {
                        let base = f * h * w;
                        for (pix, wt) in bilinear_taps(pv[2 * i], pv[2 * i + 1], h, w) {
                            let dst = &mut g[(base + pix) * c..(base + pix + 1) * c];
                            for (d, go) in dst.iter_mut().zip(&gout[i * c..(i + 1) * c]) {
                                *d += wt * go;
                            }
                        }
                    }
                });
                accumulate(grads, self, *pos, |g| {
                    for (i, &f) in frames.iter().enumerate() {
                        let (dx, dy) = bilinear_position_grad(
                            mv,
                            f * h * w,
                            pv[2 * i],
                            pv[2 * i + 1],
                            h,
                            w,
                            c,
                            &gout[i * c..(i + 1) * c],
                        );
                        g[2 * i] += dx;
                        g[2 * i + 1] += dy;
                    }
                });
            }
            Op::QuatRotate { q, x } => {
                let (qv, xv) = (self.value(*q).data(), self.value(*x).data());
                let m = xv.len() / 3;
                accumulate(grads, self, *q, |g| {
                    for i in 0..m {
                        let gq = quat_grad_q(
                            &qv[4 * i..4 * i + 4],
                            &xv[3 * i..3 * i + 3],
                            &gout[3 * i..3 * i + 3],
                        );
                        add_into(&mut g[4 * i..4 * i + 4], &gq);
                    }
                });
                accumulate(grads, self, *x, |g| {
                    for i in 0..m {
                        let gx = quat_grad_x(&qv[4 * i..4 * i + 4], &gout[3 * i..3 * i + 3]);
                        add_into(&mut g[3 * i..3 * i + 3], &gx);
                    }
                });
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    g: &Graph,
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if g.nodes[v.0].requires_grad {
        let len = g.nodes[v.0].value.len();
        f(grad_buf(grads, v, len));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Pixel offsets and weights of the (up to) four bilinear taps.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

#[allow(clippy::too_many_arguments)]
fn bilinear_position_grad(
    map: &[f64],
    base: usize,
    x: f64,
    y: f64,
    h: usize,
    w: usize,
    c: usize,
    gout: &[f64],
) -> (f64, f64) {
    let inside_x = x > 0.0 && x < (w - 1) as f64;
    let inside_y = y > 0.0 && y < (h - 1) as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let at = |yy: usize, xx: usize, ch: usize| map[(base + yy * w + xx) * c + ch];
    let (mut dx, mut dy) = (0.0, 0.0);
    for (ch, g) in gout.iter().enumerate() {
        let (m00, m01, m10, m11) = (at(y0, x0, ch), at(y0, x1, ch), at(y1, x0, ch), at(y1, x1, ch));
        if inside_x {
            dx += g * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
        }
        if inside_y {
            dy += g * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
        }
    }
    (dx, dy)
}

pub(crate) fn quat_apply(q: &[f64], v: &[f64]) -> [f64; 3] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let uu = dot3(&u, &u);
    let uv = dot3(&u, v);
    let c = cross3(&u, v);
    let s = w * w - uu;
    [
        s * v[0] + 2.0 * uv * u[0] + 2.0 * w * c[0],
        s * v[1] + 2.0 * uv * u[1] + 2.0 * w * c[1],
        s * v[2] + 2.0 * uv * u[2] + 2.0 * w * c[2],
    ]
}

fn quat_grad_q(q: &[f64], v: &[f64], gy: &[f64]) -> [f64; 4] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let uxv = cross3(&u, v);
    let gw = 2.0 * w * dot3(v, gy) + 2.0 * dot3(&uxv, gy);
    let vg = dot3(v, gy);
    let ug = dot3(&u, gy);
    let uv = dot3(&u, v);
    let vxg = cross3(v, gy);
    let mut gu = [0.0; 3];
    for i in 0..3 {
        gu[i] = -2.0 * u[i] * vg + 2.0 * v[i] * ug + 2.0 * uv * gy[i] + 2.0 * w * vxg[i];
    }
    [gw, gu[0], gu[1], gu[2]]
}

fn quat_grad_x(q: &[f64], gy: &[f64]) -> [f64; 3] {
    let (w, u) = (q[0], [q[1], q[2], q[3]]);
    let s = w * w - dot3(&u, &u);
    let ug = dot3(&u, gy);
    let uxg = cross3(&u, gy);
    [
        s * gy[0] + 2.0 * u[0] * ug - 2.0 * w * uxg[0],
        s * gy[1] + 2.0 * u[1] * ug - 2.0 * w * uxg[1],
        s * gy[2] + 2.0 * u[2] * ug - 2.0 * w * uxg[2],
    ]
}

fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
