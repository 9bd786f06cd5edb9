//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node to the tape, so node indices are already in
//! topological order and backward is a single reverse sweep. Ops whose
//! gradient is not the true derivative (fake quantization) plug in through
//! [`CustomOp`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Extension point for ops with a hand-written backward rule.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        heads: usize,
    },
    Softmax(Var, usize),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    MeanAxis1(Var),
    Sum(Var),
    Mse(Var, Var),
    SoftCrossEntropy(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread for its forward/backward
/// lifetime; build a fresh graph for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-softmax over one row.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let k = t.last_dim();
    (t.numel() / k.max(1), k)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[0] {
            return Err(shape_err("matmul", at, bt));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(at.data(), bt.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[g×m×k] · [g×k×n]`, or `[g×m×k] · [g×n×k]ᵀ` when `transpose_b`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 3 || bt.rank() != 3 || at.shape()[0] != bt.shape()[0] {
            return Err(shape_err("batched_matmul", at, bt));
        }
        let (g, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
        let (bk, n) = if transpose_b {
            (bt.shape()[2], bt.shape()[1])
        } else {
            (bt.shape()[1], bt.shape()[2])
        };
        if bk != k {
            return Err(shape_err("batched_matmul", at, bt));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let a_blk = &at.data()[i * m * k..(i + 1) * m * k];
            let b_blk = &bt.data()[i * k * n..(i + 1) * k * n];
            let c_blk = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt_acc(a_blk, b_blk, c_blk, m, k, n);
            } else {
                gemm_acc(a_blk, b_blk, c_blk, m, k, n);
            }
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::BatchedMatMul {
                a,
                b,
                transpose_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", at, bt));
        }
        let mut value = at.clone();
        value.add_assign(bt);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        if bt.rank() != 1 || bt.numel() != xt.last_dim() {
            return Err(shape_err("add_bias", xt, bt));
        }
        let mut value = xt.clone();
        let k = bt.numel();
        for row in value.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[batch·n × heads·dh]` → `[batch·heads × n × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 || batch == 0 || xt.shape()[0] % batch != 0 || xt.shape()[1] % heads != 0
        {
            return Err(Error::InvalidShape {
                shape: xt.shape().to_vec(),
                len: xt.numel(),
            });
        }
        let n = xt.shape()[0] / batch;
        let dh = xt.shape()[1] / heads;
        let value = Tensor::new(
            vec![batch * heads, n, dh],
            permute_heads(xt.data(), batch, n, heads, dh, true),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SplitHeads { x, batch, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 || xt.shape()[0] != batch * heads {
            return Err(Error::InvalidShape {
                shape: xt.shape().to_vec(),
                len: xt.numel(),
            });
        }
        let (n, dh) = (xt.shape()[1], xt.shape()[2]);
        let value = Tensor::new(
            vec![batch * n, heads * dh],
            permute_heads(xt.data(), batch, n, heads, dh, false),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MergeHeads { x, batch, heads }, rg))
    }

    /// Exp-normalize along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: xt.rank(),
            });
        }
        let mut value = xt.clone();
        let (outer, len, inner) = axis_layout(xt.shape(), axis);
        let data = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        for p in [gain, bias] {
            let pt = self.value(p);
            if pt.rank() != 1 || pt.numel() != d {
                return Err(shape_err("layer_norm", xt, pt));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xt.numel() / d;
        let mut out = vec![0.0; xt.numel()];
        let mut xhat = vec![0.0; xt.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(x);
        self.push(value, Op::Dropout(x, mask), rg)
    }

    /// Row lookup: `table[ids[i], :]` for each `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: tt.shape().to_vec(),
                len: tt.numel(),
            });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// `[a×b×c]` → `[a×c]`, averaging over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: xt.rank(),
            });
        }
        let (a, b, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut out = vec![0.0; a * c];
        for i in 0..a {
            for j in 0..b {
                let src = &xt.data()[(i * b + j) * c..(i * b + j + 1) * c];
                for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let inv = 1.0 / b as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::new(vec![a, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanAxis1(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("mse", at, bt));
        }
        let n = at.numel().max(1) as f64;
        let total: f64 = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(a, b), rg))
    }

    /// Batch mean of `-Σ softmax(teacher) · log_softmax(student)` over the
    /// last axis, temperature 1.
    pub fn soft_cross_entropy(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (st, tt) = (self.value(student), self.value(teacher));
        if st.shape() != tt.shape() {
            return Err(shape_err("soft_cross_entropy", st, tt));
        }
        let (rows, k) = rows_of(st);
        let mut logq = vec![0.0; k];
        let mut logp = vec![0.0; k];
        let mut total = 0.0;
        for r in 0..rows {
            log_softmax_row(&st.data()[r * k..(r + 1) * k], &mut logq);
            log_softmax_row(&tt.data()[r * k..(r + 1) * k], &mut logp);
            total -= logp
                .iter()
                .zip(&logq)
                .map(|(lp, lq)| lp.exp() * lq)
                .sum::<f64>();
        }
        let rg = self.rg(student) || self.rg(teacher);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftCrossEntropy(student, teacher),
            rg,
        ))
    }

    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, k) = rows_of(lt);
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lt.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut logq = vec![0.0; k];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy label",
                    index: label,
                    limit: k,
                });
            }
            log_softmax_row(&lt.data()[r * k..(r + 1) * k], &mut logq);
            total -= logq[label];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            rg,
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Custom(inputs.to_vec(), op), rg))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// Leaves that were never reached receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let reachable = if self.rg(loss) { loss.0 + 1 } else { 0 };
        if reachable > 0 {
            self.grads[loss.0] = Some(Tensor::ones(&shape));
        }

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for idx in (0..reachable).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            backprop_node(nodes, grads, node, &gout);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Moves data between `[b, n, h, dh]` and `[b, h, n, dh]` layouts.
fn permute_heads(src: &[f64], b: usize, n: usize, h: usize, dh: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ni in 0..n {
            for hi in 0..h {
                let merged = ((bi * n + ni) * h + hi) * dh;
                let splitted = ((bi * h + hi) * n + ni) * dh;
                let (from, to) = if split {
                    (merged, splitted)
                } else {
                    (splitted, merged)
                };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Tensor>], node: &Node, gout: &Tensor) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(gout.data(), bt.data(), &mut da, m, n, k);
                accumulate(nodes, grads, *a, Tensor::new(vec![m, k], da).unwrap());
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(at.data(), gout.data(), &mut db, k, m, n);
                accumulate(nodes, grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
        }
        Op::BatchedMatMul { a, b, transpose_b } => {
            let (at, bt) = (val(*a), val(*b));
            let (g, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
            let n = out.shape()[2];
            if needs(*a) {
                let mut da = vec![0.0; g * m * k];
                for i in 0..g {
                    let go = &gout.data()[i * m * n..(i + 1) * m * n];
                    let bb = &bt.data()[i * k * n..(i + 1) * k * n];
                    let dst = &mut da[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        // b is [n×k]: dA = dC · B
                        gemm_acc(go, bb, dst, m, n, k);
                    } else {
                        gemm_nt_acc(go, bb, dst, m, n, k);
                    }
                }
                accumulate(nodes, grads, *a, Tensor::new(at.shape().to_vec(), da).unwrap());
            }
            if needs(*b) {
                let mut db = vec![0.0; bt.numel()];
                for i in 0..g {
                    let go = &gout.data()[i * m * n..(i + 1) * m * n];
                    let ab = &at.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // dB[n×k] = dCᵀ · A
                        gemm_tn_acc(go, ab, dst, n, m, k);
                    } else {
                        gemm_tn_acc(ab, go, dst, k, m, n);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(bt.shape().to_vec(), db).unwrap());
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gout.clone());
            accumulate(nodes, grads, *b, gout.clone());
        }
        Op::AddBias(x, bias) => {
            accumulate(nodes, grads, *x, gout.clone());
            if needs(*bias) {
                let k = val(*bias).numel();
                let mut db = vec![0.0; k];
                for row in gout.data().chunks(k) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                accumulate(nodes, grads, *bias, Tensor::from_vec(db));
            }
        }
        Op::Scale(x, factor) => {
            accumulate(nodes, grads, *x, gout.map(|g| g * factor));
        }
        Op::Reshape(x) => {
            let g = gout.clone().reshape(val(*x).shape()).unwrap();
            accumulate(nodes, grads, *x, g);
        }
        Op::SplitHeads { x, batch, heads } => {
            let (n, dh) = (out.shape()[1], out.shape()[2]);
            let data = permute_heads(gout.data(), *batch, n, *heads, dh, false);
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), data).unwrap());
        }
        Op::MergeHeads { x, batch, heads } => {
            let (n, dh) = (val(*x).shape()[1], val(*x).shape()[2]);
            let data = permute_heads(gout.data(), *batch, n, *heads, dh, true);
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), data).unwrap());
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = axis_layout(out.shape(), *axis);
            let y = out.data();
            let gy = gout.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| gy[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
        }
        Op::Gelu(x) => {
            let xt = val(*x);
            let dx: Vec<f64> = xt
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&v, g)| g * gelu_grad_scalar(v))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.last_dim();
            let rows = out.numel() / d;
            let gv = val(*gain).data();
            let gy = gout.data();
            if needs(*gain) {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gy[r * d + j] * xhat[r * d + j];
                    }
                }
                accumulate(nodes, grads, *gain, Tensor::from_vec(dg));
            }
            if needs(*bias) {
                let mut db = vec![0.0; d];
                for row in gy.chunks(d) {
                    for (b, g) in db.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                accumulate(nodes, grads, *bias, Tensor::from_vec(db));
            }
            if needs(*x) {
                let mut dx = vec![0.0; out.numel()];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..d {
                        let dh = gy[r * d + j] * gv[j];
                        dxhat[j] = dh;
                        sum_d += dh;
                        sum_dx += dh * xhat[r * d + j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            scale * (d as f64 * dxhat[j] - sum_d - xhat[r * d + j] * sum_dx);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
        }
        Op::Dropout(x, mask) => {
            let dx: Vec<f64> = gout.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx).unwrap());
        }
        Op::GatherRows(table, ids) => {
            let tt = val(*table);
            let d = tt.shape()[1];
            let mut dt = Tensor::zeros(tt.shape());
            let data = dt.data_mut();
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    data[id * d + j] += gout.data()[i * d + j];
                }
            }
            accumulate(nodes, grads, *table, dt);
        }
        Op::MeanAxis1(x) => {
            let xt = val(*x);
            let (a, b, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
            let inv = 1.0 / b as f64;
            let mut dx = vec![0.0; xt.numel()];
            for i in 0..a {
                for j in 0..b {
                    for k in 0..c {
                        dx[(i * b + j) * c + k] = gout.data()[i * c + k] * inv;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
        }
        Op::Sum(x) => {
            let g = gout.item();
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g));
        }
        Op::Mse(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let c = 2.0 * gout.item() / at.numel().max(1) as f64;
            let diff: Vec<f64> = at
                .data()
                .iter()
                .zip(bt.data())
                .map(|(x, y)| c * (x - y))
                .collect();
            let da = Tensor::new(at.shape().to_vec(), diff).unwrap();
            if needs(*b) {
                accumulate(nodes, grads, *b, da.map(|v| -v));
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::SoftCrossEntropy(s, t) => {
            let (st, tt) = (val(*s), val(*t));
            let (rows, k) = rows_of(st);
            let scale = gout.item() / rows as f64;
            let mut ds = vec![0.0; st.numel()];
            let mut dt = vec![0.0; tt.numel()];
            let mut logq = vec![0.0; k];
            let mut logp = vec![0.0; k];
            for r in 0..rows {
                log_softmax_row(&st.data()[r * k..(r + 1) * k], &mut logq);
                log_softmax_row(&tt.data()[r * k..(r + 1) * k], &mut logp);
                let row_loss: f64 = -logp
                    .iter()
                    .zip(&logq)
                    .map(|(lp, lq)| lp.exp() * lq)
                    .sum::<f64>();
                for j in 0..k {
                    let (q, p) = (logq[j].exp(), logp[j].exp());
                    ds[r * k + j] = scale * (q - p);
                    dt[r * k + j] = scale * p * (-logq[j] - row_loss);
                }
            }
            accumulate(nodes, grads, *s, Tensor::new(st.shape().to_vec(), ds).unwrap());
            accumulate(nodes, grads, *t, Tensor::new(tt.shape().to_vec(), dt).unwrap());
        }
        Op::CrossEntropy(logits, labels) => {
            let lt = val(*logits);
            let (rows, k) = rows_of(lt);
            let scale = gout.item() / rows as f64;
            let mut dl = vec![0.0; lt.numel()];
            let mut logq = vec![0.0; k];
            for (r, &label) in labels.iter().enumerate() {
                log_softmax_row(&lt.data()[r * k..(r + 1) * k], &mut logq);
                for j in 0..k {
                    let target = if j == label { 1.0 } else { 0.0 };
                    dl[r * k + j] = scale * (logq[j].exp() - target);
                }
            }
            accumulate(nodes, grads, *logits, Tensor::new(lt.shape().to_vec(), dl).unwrap());
        }
        Op::Custom(inputs, op) => {
            let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let input_grads = op.backward(&values, out, gout);
            for (v, g) in inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    accumulate(nodes, grads, *v, g);
                }
            }
        }
    }
}
