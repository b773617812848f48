//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node; `backward` walks the tape
//! once in reverse. Nodes whose inputs are all constants are stored as
//! constants, so only the differentiable part of the tape is replayed.

use std::rc::Rc;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How the right operand of a binary op is broadcast against the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, m]` against `[n, m]`.
    Row,
    /// `[n, 1]` against `[n, m]`.
    Col,
    /// a single value
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Const,
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softplus(Var),
    L2Normalize(Var),
    Softmax { input: Var, axis: usize },
    SegmentSoftmax { input: Var, offsets: Rc<[usize]> },
    SegmentSum { input: Var, offsets: Rc<[usize]> },
    RepeatRows { input: Var, offsets: Rc<[usize]> },
    Gather { table: Var, index: Rc<[usize]> },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    BceWithLogits { logits: Var, labels: Rc<[f64]> },
    TargetAttention(Box<AttentionTape>),
}

/// Inputs and saved activations of a fused target-attention node.
#[derive(Debug)]
struct AttentionTape {
    seq: Var,
    cand: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    offsets: Rc<[usize]>,
    /// Post-ReLU hidden rows, `[N, h]`.
    hidden: Vec<f64>,
    /// Softmax weight per sequence row.
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, 1),
        [n, rest @ ..] => (*n, rest.iter().product()),
        [] => (1, 1),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn scalar_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn scalar_softplus(x: f64) -> f64 {
    softplus(x)
}

/// `c[n,m] += a[n,k] * b[k,m]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

fn bcast_apply(av: &[f64], bv: &[f64], mode: Bcast, cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(av.len());
    match mode {
        Bcast::Same => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
        Bcast::Scalar => out.extend(av.iter().map(|&x| f(x, bv[0]))),
        Bcast::Row => {
            for row in av.chunks(cols) {
                out.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
        }
        Bcast::Col => {
            for (row, &y) in av.chunks(cols).zip(bv) {
                out.extend(row.iter().map(|&x| f(x, y)));
            }
        }
    }
    out
}

fn add_into(dst: &mut Vec<f64>, len: usize, src: impl IntoIterator<Item = (usize, f64)>) {
    if dst.is_empty() {
        dst.resize(len, 0.0);
    }
    for (i, v) in src {
        dst[i] += v;
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(Vec::as_slice)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_str(&self, vars: &[Var]) -> String {
        vars.iter()
            .map(|v| format!("{:?}", self.nodes[v.0].shape))
            .collect::<Vec<_>>()
            .join(" vs ")
    }

    /// Leaf that participates in differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            requires_grad: rg,
            op: if rg { Op::Leaf(None) } else { Op::Const },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Const))
    }

    /// Places a parameter on the tape; its gradient is written back to the
    /// store by [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            requires_grad: true,
            op: Op::Leaf(Some(id)),
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", self.shape_str(&[a, b])));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul(a, b)))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.nodes[b.0].value.len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 2 {
            if sb[0] == 1 && sb[1] == sa[1] {
                return Ok(Bcast::Row);
            }
            if sb[1] == 1 && sb[0] == sa[0] {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::shape(op, self.shape_str(&[a, b])))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            _ => "elementwise_mul",
        };
        let mode = self.bcast(name, a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        let (_, cols) = rows_cols(&shape);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = match kind {
            BinKind::Add => bcast_apply(av, bv, mode, cols, |x, y| x + y),
            BinKind::Sub => bcast_apply(av, bv, mode, cols, |x, y| x - y),
            BinKind::Mul => bcast_apply(av, bv, mode, cols, |x, y| x * y),
        };
        let rg = self.rg(&[a, b]);
        let op = match kind {
            BinKind::Add => Op::Add(a, b, mode),
            BinKind::Sub => Op::Sub(a, b, mode),
            _ => Op::Mul(a, b, mode),
        };
        Ok(self.push(shape, out, rg, op))
    }

    /// `a + b`; `b` may be a `[1, m]` row, an `[n, 1]` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| x + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} inputs, axis {axis}", inputs.len())));
        }
        let dims: Vec<(usize, usize)> = inputs.iter().map(|v| rows_cols(&self.nodes[v.0].shape)).collect();
        let (rows0, cols0) = dims[0];
        let ok = if axis == 1 {
            dims.iter().all(|d| d.0 == rows0)
        } else {
            dims.iter().all(|d| d.1 == cols0)
        };
        if !ok {
            return Err(Error::shape("concat", self.shape_str(inputs)));
        }
        let (shape, out) = if axis == 1 {
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows0 * total);
            for r in 0..rows0 {
                for (v, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.nodes[v.0].value[r * c..(r + 1) * c]);
                }
            }
            (vec![rows0, total], out)
        } else {
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(total * cols0);
            for v in inputs {
                out.extend_from_slice(&self.nodes[v.0].value);
            }
            (vec![total, cols0], out)
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Elementwise `|a|`; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Scales each row to unit Euclidean norm. All-zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (rows, cols) = rows_cols(&n.shape);
        let mut out = n.value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::L2Normalize(a))
    }

    /// Softmax of a 2-D tensor over `axis` (1 = within each row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.shape.len() != 2 || axis > 1 {
            return Err(Error::shape("softmax_over_axis", format!("{:?} axis {axis}", n.shape)));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut out = n.value.clone();
        let (outer, inner, stride_o, stride_i) = if axis == 1 {
            (rows, cols, cols, 1)
        } else {
            (cols, rows, 1, cols)
        };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let max = (0..inner).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..inner {
                let e = (out[idx(i)] - max).exp();
                out[idx(i)] = e;
                sum += e;
            }
            for i in 0..inner {
                out[idx(i)] /= sum;
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, rg, Op::Softmax { input: a, axis }))
    }

    /// Softmax within ragged segments of a column of scores. Segment `b`
    /// spans rows `offsets[b]..offsets[b + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (rows, cols) = rows_cols(&n.shape);
        if cols != 1 || offsets.last().copied() != Some(rows) {
            return Err(Error::shape(
                "segment_softmax",
                format!("{:?} with {} segment rows", n.shape, offsets.last().unwrap_or(&0)),
            ));
        }
        let mut out = n.value.clone();
        for w in offsets.windows(2) {
            let seg = &mut out[w[0]..w[1]];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in seg.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            seg.iter_mut().for_each(|x| *x /= sum);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, rg, Op::SegmentSoftmax { input: a, offsets }))
    }

    /// Sums the rows of each segment: `[N, d] -> [B, d]`. Empty segments
    /// give zero rows.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (rows, cols) = rows_cols(&n.shape);
        if offsets.last().copied() != Some(rows) || offsets.len() < 2 {
            return Err(Error::shape("segment_sum", format!("{:?}", n.shape)));
        }
        let b = offsets.len() - 1;
        let mut out = vec![0.0; b * cols];
        for s in 0..b {
            let dst = &mut out[s * cols..(s + 1) * cols];
            for r in offsets[s]..offsets[s + 1] {
                for (d, x) in dst.iter_mut().zip(&n.value[r * cols..(r + 1) * cols]) {
                    *d += x;
                }
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![b, cols], out, rg, Op::SegmentSum { input: a, offsets }))
    }

    /// Repeats row `b` of `a` once per element of segment `b`: `[B, d] -> [N, d]`.
    pub fn repeat_rows(&mut self, a: Var, offsets: Rc<[usize]>) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (rows, cols) = rows_cols(&n.shape);
        if offsets.len() != rows + 1 {
            return Err(Error::shape(
                "repeat_rows",
                format!("{:?} with {} segments", n.shape, offsets.len().saturating_sub(1)),
            ));
        }
        let total = offsets[rows];
        let mut out = Vec::with_capacity(total * cols);
        for s in 0..rows {
            for _ in offsets[s]..offsets[s + 1] {
                out.extend_from_slice(&n.value[s * cols..(s + 1) * cols]);
            }
        }
        let rg = n.requires_grad;
        if total == 0 {
            return Err(Error::shape("repeat_rows", "all segments empty"));
        }
        Ok(self.push(vec![total, cols], out, rg, Op::RepeatRows { input: a, offsets }))
    }

    /// Fused DIN-style target attention. Row `r` of segment `b` is scored by
    /// `relu([e_r, c_b, e_r * c_b] w1 + b1) w2 + b2`, the scores are
    /// softmaxed within the segment and the output row `b` is the weighted
    /// sum of its `e_r`. Empty segments give zero rows.
    ///
    /// Shapes: `seq [N, d]`, `cand [B, d]`, `w1 [3d, h]`, `b1 [1, h]`,
    /// `w2 [h, 1]`, `b2 [1, 1]`; `offsets` has `B + 1` entries ending at `N`.
    #[allow(clippy::too_many_arguments)]
    pub fn target_attention(
        &mut self,
        seq: Var,
        cand: Var,
        offsets: Rc<[usize]>,
        w1: Var,
        b1: Var,
        w2: Var,
        b2: Var,
    ) -> Result<Var> {
        let shp = |v: Var| self.nodes[v.0].shape.clone();
        let (ss, cs, w1s, b1s, w2s, b2s) = (shp(seq), shp(cand), shp(w1), shp(b1), shp(w2), shp(b2));
        let ok = ss.len() == 2
            && cs.len() == 2
            && ss[1] == cs[1]
            && w1s == [3 * cs[1], w1s.get(1).copied().unwrap_or(0)]
            && b1s == [1, w1s[1]]
            && w2s == [w1s[1], 1]
            && b2s == [1, 1]
            && offsets.len() == cs[0] + 1
            && offsets.last() == Some(&ss[0]);
        if !ok {
            return Err(Error::shape(
                "target_attention",
                format!(
                    "seq {ss:?}, cand {cs:?}, w1 {w1s:?}, b1 {b1s:?}, w2 {w2s:?}, b2 {b2s:?}, {} offsets",
                    offsets.len()
                ),
            ));
        }
        let (d, h, b) = (cs[1], w1s[1], cs[0]);
        let n = ss[0];
        let sv = &self.nodes[seq.0].value;
        let cv = &self.nodes[cand.0].value;
        let w1v = &self.nodes[w1.0].value;
        let (b1v, w2v, b2v) = (
            &self.nodes[b1.0].value,
            &self.nodes[w2.0].value,
            self.nodes[b2.0].value[0],
        );
        let (wa, rest) = w1v.split_at(d * h);
        let (wc, wx) = rest.split_at(d * h);
        let mut hidden = vec![0.0; n * h];
        let mut weights = vec![0.0; n];
        let mut out = vec![0.0; b * d];
        let mut base = vec![0.0; h];
        let mut ex = vec![0.0; d];
        for s in 0..b {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo == hi {
                continue;
            }
            let c = &cv[s * d..(s + 1) * d];
            base.copy_from_slice(b1v);
            matmul_into(c, wc, &mut base, 1, d, h);
            for r in lo..hi {
                let e = &sv[r * d..(r + 1) * d];
                let hr = &mut hidden[r * h..(r + 1) * h];
                hr.copy_from_slice(&base);
                for ((x, &ei), &ci) in ex.iter_mut().zip(e).zip(c) {
                    *x = ei * ci;
                }
                matmul_into(e, wa, hr, 1, d, h);
                matmul_into(&ex, wx, hr, 1, d, h);
                let mut score = b2v;
                for (x, w) in hr.iter_mut().zip(w2v) {
                    *x = x.max(0.0);
                    score += *x * w;
                }
                weights[r] = score;
            }
            let seg = &mut weights[lo..hi];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in seg.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            seg.iter_mut().for_each(|x| *x /= z);
            let o = &mut out[s * d..(s + 1) * d];
            for r in lo..hi {
                let a = weights[r];
                for (oj, ej) in o.iter_mut().zip(&sv[r * d..(r + 1) * d]) {
                    *oj += a * ej;
                }
            }
        }
        let rg = self.rg(&[seq, cand, w1, b1, w2, b2]);
        let tape = AttentionTape {
            seq,
            cand,
            w1,
            b1,
            w2,
            b2,
            offsets,
            hidden,
            weights,
        };
        Ok(self.push(vec![b, d], out, rg, Op::TargetAttention(Box::new(tape))))
    }

    /// Row lookup: `table[index[i]]` for each `i`.
    pub fn gather(&mut self, table: Var, index: Rc<[usize]>) -> Result<Var> {
        let n = &self.nodes[table.0];
        let (rows, cols) = rows_cols(&n.shape);
        if index.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", n.shape),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            out.extend_from_slice(&n.value[i * cols..(i + 1) * cols]);
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![index.len(), cols], out, rg, Op::Gather { table, index }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![m], rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// computed in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<[f64]>) -> Result<Var> {
        let n = &self.nodes[logits.0];
        if n.value.len() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {} labels", n.shape, labels.len()),
            ));
        }
        let total: f64 = n
            .value
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let rg = n.requires_grad;
        let loss = total / labels.len() as f64;
        Ok(self.push(vec![1], vec![loss], rg, Op::BceWithLogits { logits, labels }))
    }

    /// Accumulates `d loss / d x` into every reachable leaf; parameter
    /// gradients are added (`+=`) to the store.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(id)) = node.op {
                let g = &self.grads[i];
                if g.is_empty() {
                    continue;
                }
                for (dst, src) in store.get_mut(id).grad_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Like [`Graph::backward`] but leaves parameter stores untouched;
    /// gradients are read back with [`Graph::grad`].
    pub fn backward_grads(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", ln.shape),
            ));
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        if !ln.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            if g.is_empty() {
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrow: contributions are computed from node values and
        // pushed into `self.grads`, which is a separate field.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        fn acc_into(nodes: &[Node], grads: &mut [Vec<f64>], v: Var, contrib: impl Iterator<Item = (usize, f64)>) {
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                add_into(&mut grads[v.0], len, contrib);
            }
        }
        macro_rules! acc {
            ($grads:expr, $v:expr, $it:expr $(,)?) => {
                acc_into(nodes, $grads, $v, $it)
            };
        }
        match &node.op {
            Op::Const | Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].requires_grad {
                    let da = &mut grads[a.0];
                    if da.is_empty() {
                        da.resize(n * k, 0.0);
                    }
                    // da = g * b^T, accumulated row by row against b^T so the
                    // inner loop is a contiguous axpy.
                    let mut bt = vec![0.0; m * k];
                    for p in 0..k {
                        for j in 0..m {
                            bt[j * k + p] = bv[p * m + j];
                        }
                    }
                    matmul_into(g, &bt, da.as_mut_slice(), n, m, k);
                }
                if nodes[b.0].requires_grad {
                    let db = &mut grads[b.0];
                    if db.is_empty() {
                        db.resize(k * m, 0.0);
                    }
                    for r in 0..n {
                        let g_row = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (d, x) in db[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                                *d += a_rp * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc!(grads, *a, &mut g.iter().copied().enumerate());
                let (_, cols) = rows_cols(&node.shape);
                let mode = *mode;
                acc!(
                    grads,
                    *b,
                    &mut g.iter().enumerate().map(move |(j, &x)| {
                        let idx = match mode {
                            Bcast::Same => j,
                            Bcast::Row => j % cols,
                            Bcast::Col => j / cols,
                            Bcast::Scalar => 0,
                        };
                        (idx, sign * x)
                    }),
                );
            }
            Op::Mul(a, b, mode) => {
                let (_, cols) = rows_cols(&node.shape);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let mode = *mode;
                let bidx = move |j: usize| match mode {
                    Bcast::Same => j,
                    Bcast::Row => j % cols,
                    Bcast::Col => j / cols,
                    Bcast::Scalar => 0,
                };
                acc!(grads, *a, &mut g.iter().enumerate().map(|(j, &x)| (j, x * bv[bidx(j)])));
                acc!(grads, *b, &mut g.iter().enumerate().map(|(j, &x)| (bidx(j), x * av[j])));
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc!(grads, *a, &mut g.iter().enumerate().map(|(j, &x)| (j, x * c)));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc!(grads, *a, &mut g.iter().copied().enumerate());
            }
            Op::Concat { inputs, axis } => {
                let (rows, total) = rows_cols(&node.shape);
                if *axis == 1 {
                    let mut start = 0;
                    for v in inputs {
                        let (_, c) = rows_cols(&nodes[v.0].shape);
                        let st = start;
                        acc!(
                            grads,
                            *v,
                            &mut (0..rows * c).map(|j| (j, g[(j / c) * total + st + j % c])),
                        );
                        start += c;
                    }
                } else {
                    let mut start = 0;
                    for v in inputs {
                        let len = nodes[v.0].value.len();
                        let st = start;
                        acc!(grads, *v, &mut (0..len).map(|j| (j, g[st + j])));
                        start += len;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc!(
                    grads,
                    *a,
                    &mut g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).enumerate()
                );
            }
            Op::Relu(a) => {
                let y = &node.value;
                acc!(
                    grads,
                    *a,
                    &mut g
                        .iter()
                        .zip(y)
                        .map(|(&x, &y)| if y > 0.0 { x } else { 0.0 })
                        .enumerate(),
                );
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc!(
                    grads,
                    *a,
                    &mut g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)).enumerate()
                );
            }
            Op::Abs(a) => {
                let xv = &nodes[a.0].value;
                acc!(
                    grads,
                    *a,
                    &mut g
                        .iter()
                        .zip(xv)
                        .map(|(&gx, &x)| {
                            if x > 0.0 {
                                gx
                            } else if x < 0.0 {
                                -gx
                            } else {
                                0.0
                            }
                        })
                        .enumerate(),
                );
            }
            Op::Softplus(a) => {
                let xv = &nodes[a.0].value;
                acc!(
                    grads,
                    *a,
                    &mut g.iter().zip(xv).map(|(gx, &x)| gx * sigmoid(x)).enumerate()
                );
            }
            Op::L2Normalize(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                let xv = &nodes[a.0].value;
                let y = &node.value;
                let mut contrib = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        contrib[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                acc!(grads, *a, &mut contrib.into_iter().enumerate());
            }
            Op::Softmax { input, axis } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                let (outer, inner, so, si) = if *axis == 1 {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                let mut contrib = vec![0.0; rows * cols];
                for o in 0..outer {
                    let idx = |i: usize| o * so + i * si;
                    let dot: f64 = (0..inner).map(|i| y[idx(i)] * g[idx(i)]).sum();
                    for i in 0..inner {
                        contrib[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
                acc!(grads, *input, &mut contrib.into_iter().enumerate());
            }
            Op::SegmentSoftmax { input, offsets } => {
                let y = &node.value;
                let mut contrib = vec![0.0; y.len()];
                for w in offsets.windows(2) {
                    let dot: f64 = (w[0]..w[1]).map(|j| y[j] * g[j]).sum();
                    for j in w[0]..w[1] {
                        contrib[j] = y[j] * (g[j] - dot);
                    }
                }
                acc!(grads, *input, &mut contrib.into_iter().enumerate());
            }
            Op::SegmentSum { input, offsets } => {
                let cols = node.shape[1];
                let n_rows = *offsets.last().unwrap();
                let mut contrib = vec![0.0; n_rows * cols];
                for (s, w) in offsets.windows(2).enumerate() {
                    for r in w[0]..w[1] {
                        contrib[r * cols..(r + 1) * cols].copy_from_slice(&g[s * cols..(s + 1) * cols]);
                    }
                }
                acc!(grads, *input, &mut contrib.into_iter().enumerate());
            }
            Op::RepeatRows { input, offsets } => {
                let cols = node.shape[1];
                let b = offsets.len() - 1;
                let mut contrib = vec![0.0; b * cols];
                for (s, w) in offsets.windows(2).enumerate() {
                    let dst = &mut contrib[s * cols..(s + 1) * cols];
                    for r in w[0]..w[1] {
                        for (d, x) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += x;
                        }
                    }
                }
                acc!(grads, *input, &mut contrib.into_iter().enumerate());
            }
            Op::Gather { table, index } => {
                if nodes[table.0].requires_grad {
                    let cols = node.shape[1];
                    let len = nodes[table.0].value.len();
                    let dt = &mut grads[table.0];
                    if dt.is_empty() {
                        dt.resize(len, 0.0);
                    }
                    for (r, &src) in index.iter().enumerate() {
                        for (d, x) in dt[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += x;
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                let v = g[0] / n as f64;
                acc!(grads, *a, &mut (0..n).map(|j| (j, v)));
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.len();
                let v = g[0];
                acc!(grads, *a, &mut (0..n).map(|j| (j, v)));
            }
            Op::TargetAttention(t) => {
                let (d, h) = (nodes[t.cand.0].shape[1], nodes[t.w1.0].shape[1]);
                let sv = &nodes[t.seq.0].value;
                let cv = &nodes[t.cand.0].value;
                let w1v = &nodes[t.w1.0].value;
                let w2v = &nodes[t.w2.0].value;
                let (wa, rest) = w1v.split_at(d * h);
                let (wc, wx) = rest.split_at(d * h);
                let mut dseq = vec![0.0; sv.len()];
                let mut dcand = vec![0.0; cv.len()];
                let mut dw1 = vec![0.0; w1v.len()];
                let mut db1 = vec![0.0; h];
                let mut dw2 = vec![0.0; h];
                let mut db2 = 0.0;
                let (dwa, drest) = dw1.split_at_mut(d * h);
                let (dwc, dwx) = drest.split_at_mut(d * h);
                let mut dh = vec![0.0; h];
                let mut dh_sum = vec![0.0; h];
                let mut ex = vec![0.0; d];
                let mut dxa = vec![0.0; d];
                let mut dxx = vec![0.0; d];
                for (s, win) in t.offsets.windows(2).enumerate() {
                    let (lo, hi) = (win[0], win[1]);
                    if lo == hi {
                        continue;
                    }
                    let c = &cv[s * d..(s + 1) * d];
                    let gs = &g[s * d..(s + 1) * d];
                    // d out / d a_r = g . e_r; softmax backward needs its
                    // weighted mean over the segment.
                    let ga: Vec<f64> = (lo..hi)
                        .map(|r| sv[r * d..(r + 1) * d].iter().zip(gs).map(|(x, y)| x * y).sum())
                        .collect();
                    let mean: f64 = (lo..hi).zip(&ga).map(|(r, x)| t.weights[r] * x).sum();
                    dh_sum.fill(0.0);
                    for (k, r) in (lo..hi).enumerate() {
                        let a = t.weights[r];
                        let e = &sv[r * d..(r + 1) * d];
                        let de = &mut dseq[r * d..(r + 1) * d];
                        for (x, y) in de.iter_mut().zip(gs) {
                            *x += a * y;
                        }
                        let ds = a * (ga[k] - mean);
                        if ds == 0.0 {
                            continue;
                        }
                        db2 += ds;
                        let hr = &t.hidden[r * h..(r + 1) * h];
                        for j in 0..h {
                            dw2[j] += ds * hr[j];
                            dh[j] = if hr[j] > 0.0 { ds * w2v[j] } else { 0.0 };
                            dh_sum[j] += dh[j];
                        }
                        for ((x, &ei), &ci) in ex.iter_mut().zip(e).zip(c) {
                            *x = ei * ci;
                        }
                        // Weight gradients: outer products with the inputs.
                        for i in 0..d {
                            let (ei, xi) = (e[i], ex[i]);
                            let (ra, rx) = (&mut dwa[i * h..(i + 1) * h], &mut dwx[i * h..(i + 1) * h]);
                            for j in 0..h {
                                ra[j] += ei * dh[j];
                                rx[j] += xi * dh[j];
                            }
                        }
                        // Input gradients through W1.
                        for i in 0..d {
                            let (ra, rx) = (&wa[i * h..(i + 1) * h], &wx[i * h..(i + 1) * h]);
                            dxa[i] = ra.iter().zip(&dh).map(|(w, x)| w * x).sum();
                            dxx[i] = rx.iter().zip(&dh).map(|(w, x)| w * x).sum();
                        }
                        let dc = &mut dcand[s * d..(s + 1) * d];
                        for i in 0..d {
                            de[i] += dxa[i] + dxx[i] * c[i];
                            dc[i] += dxx[i] * e[i];
                        }
                    }
                    for (x, y) in db1.iter_mut().zip(&dh_sum) {
                        *x += y;
                    }
                    let dc = &mut dcand[s * d..(s + 1) * d];
                    for i in 0..d {
                        let rc = &wc[i * h..(i + 1) * h];
                        dc[i] += rc.iter().zip(&dh_sum).map(|(w, x)| w * x).sum::<f64>();
                        let ci = c[i];
                        for (x, y) in dwc[i * h..(i + 1) * h].iter_mut().zip(&dh_sum) {
                            *x += ci * y;
                        }
                    }
                }
                acc!(grads, t.seq, dseq.into_iter().enumerate());
                acc!(grads, t.cand, dcand.into_iter().enumerate());
                acc!(grads, t.w1, dw1.into_iter().enumerate());
                acc!(grads, t.b1, db1.into_iter().enumerate());
                acc!(grads, t.w2, dw2.into_iter().enumerate());
                acc!(grads, t.b2, std::iter::once((0, db2)));
            }
            Op::BceWithLogits { logits, labels } => {
                let zv = &nodes[logits.0].value;
                let scale = g[0] / labels.len() as f64;
                acc!(
                    grads,
                    *logits,
                    &mut zv
                        .iter()
                        .zip(labels.iter())
                        .map(|(&z, &y)| scale * (sigmoid(z) - y))
                        .enumerate(),
                );
            }
        }
    }
}
