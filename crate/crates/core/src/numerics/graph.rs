//! Tape of primitive operations with reverse-mode adjoints.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order, so `backward` walks the tape from the end and visits each node once.
//! Adjoints arriving from several consumers are summed in tape order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, sqrt, tanh};

use super::tensor::{gemm_acc, matmul, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
struct LstmCache {
    /// Post-nonlinearity gates per frame: i, f, g, o.
    gates: Vec<f64>,
    cells: Vec<f64>,
    cell_tanh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Act(Var, Activation),
    Softmax(Var, f64),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Lstm {
        pre: Var,
        w_hh: Var,
        reverse: bool,
        cache: LstmCache,
    },
    /// Scalar whose local gradient w.r.t. `input` was computed by the caller.
    ScalarFn { input: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of tracked tensors and the operations applied to them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like its value when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(v).shape()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => tanh(x),
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
    }
}

/// Row-wise softmax of `scale * a`, with per-row max subtraction.
///
/// Columns whose `key_mask` entry is `false` receive exactly zero weight.
pub fn scaled_softmax_rows(a: &Tensor, scale: f64, key_mask: Option<&[bool]>) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::param("scale", "must be positive"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let (t, n) = a.expect_matrix("softmax")?;
    if let Some(m) = key_mask {
        if m.len() != n {
            return Err(Error::dim("softmax mask", a.shape(), &[m.len()]));
        }
    }
    let keep = |j: usize| key_mask.map_or(true, |m| m[j]);
    let mut out = vec![0.0; t * n];
    for i in 0..t {
        let row = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = exp(scale * (v - max));
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::matrix(t, n, out)
}

/// Per-row normalization followed by a per-column affine map.
///
/// Returns the output together with the normalized rows and inverse standard
/// deviations needed for the adjoint.
fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (t, d) = x.expect_matrix("layer_norm")?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / sqrt(var + LAYER_NORM_EPS);
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::matrix(t, d, out)?, xhat, inv_std))
}

/// Layer normalization with `LAYER_NORM_EPS` added to the variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_forward(x, gain, bias).map(|r| r.0)
}

pub fn elementwise(kind: Activation, a: &Tensor) -> Tensor {
    a.map(|x| activate(kind, x))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tracked leaf whose adjoint is computed.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input; no adjoint flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = super::tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    /// Matrix plus a row vector added to every row (`X + 1 b^T`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let b = self.value(bias);
        let (t, d) = x.expect_matrix("add_bias")?;
        if b.len() != d {
            return Err(Error::dim("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for i in 0..t {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += *bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// `x W + 1 b^T`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
            *o *= *v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = elementwise(kind, self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Act(a, kind), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn softmax_rows(&mut self, a: Var, scale: f64, key_mask: Option<&[bool]>) -> Result<Var> {
        let out = scaled_softmax_rows(self.value(a), scale, key_mask)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, scale), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat_cols".into()))?;
        let t = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let v = self.value(p);
            v.expect_matrix("concat_cols")?;
            if v.rows() != t {
                return Err(Error::dim("concat_cols", self.value(first).shape(), v.shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(t, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (t, _) = x.expect_matrix("l2_normalize_rows")?;
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(t);
        for i in 0..t {
            let row = out.row_mut(i);
            let n = sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2NormalizeRows { input: a, norms }, rg))
    }

    /// Unidirectional LSTM recurrence over precomputed input projections.
    ///
    /// `pre` is `T x 4H` holding `x_t W_ih + b` with gate blocks ordered
    /// input, forget, cell, output; `w_hh` is `H x 4H`. With `reverse` the
    /// sequence is consumed from the last frame to the first. Output is the
    /// `T x H` hidden state sequence, aligned with the input frames.
    pub fn lstm(&mut self, pre: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let p = self.value(pre);
        let u = self.value(w_hh);
        let (t, four_h) = p.expect_matrix("lstm")?;
        let (h, four_h2) = u.expect_matrix("lstm")?;
        if four_h != 4 * h || four_h2 != four_h {
            return Err(Error::dim("lstm", p.shape(), u.shape()));
        }
        let mut gates = vec![0.0; t * four_h];
        let mut cells = vec![0.0; t * h];
        let mut cell_tanh = vec![0.0; t * h];
        let mut hidden = vec![0.0; t * h];
        let mut a = vec![0.0; four_h];
        let mut prev: Option<usize> = None;
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            a.copy_from_slice(p.row(ti));
            if let Some(pi) = prev {
                gemm_acc(1, h, four_h, &hidden[pi * h..(pi + 1) * h], u.data(), &mut a);
            }
            let g = &mut gates[ti * four_h..(ti + 1) * four_h];
            for j in 0..h {
                let ig = sigmoid(a[j]);
                let fg = sigmoid(a[h + j]);
                let cg = tanh(a[2 * h + j]);
                let og = sigmoid(a[3 * h + j]);
                g[j] = ig;
                g[h + j] = fg;
                g[2 * h + j] = cg;
                g[3 * h + j] = og;
                let c_prev = prev.map_or(0.0, |pi| cells[pi * h + j]);
                let c = fg * c_prev + ig * cg;
                let tc = tanh(c);
                cells[ti * h + j] = c;
                cell_tanh[ti * h + j] = tc;
                hidden[ti * h + j] = og * tc;
            }
            prev = Some(ti);
        }
        let rg = self.rg(pre) || self.rg(w_hh);
        Ok(self.push(
            Tensor::matrix(t, h, hidden)?,
            Op::Lstm {
                pre,
                w_hh,
                reverse,
                cache: LstmCache {
                    gates,
                    cells,
                    cell_tanh,
                },
            },
            rg,
        ))
    }

    /// Registers a scalar function of `input` whose gradient the caller has
    /// already evaluated. Loss kernels use this to fuse their adjoints.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::dim("scalar_fn", self.value(input).shape(), grad.shape()));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let g = super::tensor::matmul_nt(dy, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = super::tensor::matmul_tn(self.value(*a), dy)?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let g = matmul(dy, self.value(*b))?;
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = super::tensor::matmul_tn(dy, self.value(*a))?;
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias(a, b) => {
                if self.rg(*b) {
                    let d = dy.cols();
                    let mut gb = vec![0.0; d];
                    for i in 0..dy.rows() {
                        for (acc, v) in gb.iter_mut().zip(dy.row(i)) {
                            *acc += *v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb)?);
                }
                self.accumulate(grads, *a, dy.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut g = dy.clone();
                    for (gv, v) in g.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *gv *= *v;
                    }
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let mut g = dy.clone();
                    for (gv, v) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *gv *= *v;
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|v| v * s));
            }
            Op::Sum(a) => {
                let g = dy.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Act(a, kind) => {
                let y = &node.value;
                let x = self.value(*a);
                let mut g = dy.clone();
                for ((gv, &yv), &xv) in g.data_mut().iter_mut().zip(y.data()).zip(x.data()) {
                    *gv *= match kind {
                        Activation::Sigmoid => yv * (1.0 - yv),
                        Activation::Tanh => 1.0 - yv * yv,
                        Activation::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                }
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a, scale) => {
                let y = &node.value;
                let mut g = dy.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = yr.iter().zip(dy.row(i)).map(|(p, q)| p * q).sum();
                    for (gv, &yv) in g.row_mut(i).iter_mut().zip(yr) {
                        *gv = scale * yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (t, d) = (dy.rows(), dy.cols());
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for i in 0..t {
                        for j in 0..d {
                            let dv = dy.data()[i * d + j];
                            gg[j] += dv * xhat[i * d + j];
                            gb[j] += dv;
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, gg)?);
                    self.accumulate(grads, *bias, Tensor::new(bs, gb)?);
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; t * d];
                    let mut dxhat = vec![0.0; d];
                    for i in 0..t {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let v = dy.data()[i * d + j] * gv[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[i * d + j];
                        }
                        let inv = inv_std[i];
                        for j in 0..d {
                            gx[i * d + j] = inv * (dxhat[j] - s1 / d as f64 - xhat[i * d + j] * s2 / d as f64);
                        }
                    }
                    self.accumulate(grads, *input, Tensor::matrix(t, d, gx)?);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(dy.rows() * w);
                        for i in 0..dy.rows() {
                            g.extend_from_slice(&dy.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(dy.rows(), w, g)?);
                    }
                    offset += w;
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let mut g = dy.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = yr.iter().zip(dy.row(i)).map(|(p, q)| p * q).sum();
                    let n = norms[i];
                    for (gv, &yv) in g.row_mut(i).iter_mut().zip(yr) {
                        *gv = (*gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::Lstm {
                pre,
                w_hh,
                reverse,
                cache,
            } => {
                let (gpre, gw) = self.lstm_backward(&node.value, dy, *w_hh, *reverse, cache)?;
                self.accumulate(grads, *pre, gpre);
                if self.rg(*w_hh) {
                    self.accumulate(grads, *w_hh, gw);
                }
            }
            Op::ScalarFn { input, grad } => {
                let s = dy.item();
                self.accumulate(grads, *input, grad.map(|v| v * s));
            }
        }
        Ok(())
    }

    fn lstm_backward(
        &self,
        hidden: &Tensor,
        dy: &Tensor,
        w_hh: Var,
        reverse: bool,
        cache: &LstmCache,
    ) -> Result<(Tensor, Tensor)> {
        let u = self.value(w_hh);
        let (h, four_h) = (u.rows(), u.cols());
        let t = hidden.rows();
        let ut = u.transpose();
        let mut gpre = vec![0.0; t * four_h];
        let mut gw = vec![0.0; h * four_h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; four_h];
        for step in (0..t).rev() {
            let ti = if reverse { t - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if reverse {
                Some(ti + 1)
            } else {
                Some(ti - 1)
            };
            let g = &cache.gates[ti * four_h..(ti + 1) * four_h];
            for j in 0..h {
                let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cache.cell_tanh[ti * h + j];
                let dh = dy.data()[ti * h + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                let c_prev = prev.map_or(0.0, |pi| cache.cells[pi * h + j]);
                da[j] = dc * cg * ig * (1.0 - ig);
                da[h + j] = dc * c_prev * fg * (1.0 - fg);
                da[2 * h + j] = dc * ig * (1.0 - cg * cg);
                da[3 * h + j] = d_o * og * (1.0 - og);
                dc_next[j] = dc * fg;
            }
            gpre[ti * four_h..(ti + 1) * four_h].copy_from_slice(&da);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            if let Some(pi) = prev {
                let hp = hidden.row(pi);
                gemm_acc(h, 1, four_h, hp, &da, &mut gw);
                gemm_acc(1, four_h, h, &da, ut.data(), &mut dh_next);
            }
        }
        Ok((Tensor::matrix(t, four_h, gpre)?, Tensor::matrix(h, four_h, gw)?))
    }
}
