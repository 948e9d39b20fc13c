//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op executed during a forward pass as a node
//! holding its output value. [`Tape::backward`] walks the nodes in exact
//! reverse order and accumulates vector-Jacobian products into the inputs.
//! Nodes that do not depend on any gradient-tracking leaf are never visited.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating it.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Trace(Var),
    DivScalar(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    /// A tape whose [`Tape::param`] leaves read from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node
    /// so that gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::contract("tape has no parameter store attached"))?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let v = self.leaf(store.get(id).clone(), true)?;
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = matmul_nn(av, bv);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let out = matmul_nt(av, bv);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", out, Op::MatMulNt(a, b), rg)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("matmul_tn", av, bv));
        }
        let out = matmul_tn(av, bv);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_tn", out, Op::MatMulTn(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push("add_row", out, Op::AddRow(a, bias), rg)
    }

    /// Scales row `i` of `a` by entry `i` of the `m×1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(a) || self.rg(c);
        self.push("mul_col", out, Op::MulCol(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push("relu", out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", out, Op::Tanh(a), rg)
    }

    /// Elementwise square root. The derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push("sqrt", out, Op::Sqrt(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization to zero mean and unit (biased) variance,
    /// followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if d == 0 {
            return Err(Error::contract("layer_norm over zero-width rows"));
        }
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = Tensor::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Tensor::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.set(i, j, h);
                out.set(i, j, gv.data()[j] * h + bv.data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for width {}",
                start + len,
                av.cols()
            )));
        }
        let out = Tensor::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let rg = self.rg(a);
        self.push("slice_cols", out, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                av.rows()
            )));
        }
        let out = av.gather_rows(idx);
        let rg = self.rg(a);
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", out, Op::Sum(a), rg)
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(shape_err("trace", av, av));
        }
        let out = Tensor::scalar((0..av.rows()).map(|i| av.get(i, i)).sum());
        let rg = self.rg(a);
        self.push("trace", out, Op::Trace(a), rg)
    }

    /// `a / s` for a `1×1` divisor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.shape() != [1, 1] {
            return Err(shape_err("div_scalar", av, sv));
        }
        let d = sv.item();
        let out = av.map(|v| v / d);
        let rg = self.rg(a) || self.rg(s);
        self.push("div_scalar", out, Op::DivScalar(a, s), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::contract(format!(
                "{} labels for {} logit rows",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= lv.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        if labels.is_empty() {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
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

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_nn(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::MatMulTn(a, b) => {
                // out = aᵀ b: da = b gᵀ, db = a g
                if self.rg(*a) {
                    self.accumulate(grads, *a, matmul_nt(self.value(*b), g));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, matmul_nn(self.value(*a), g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::MulCol(a, c) => {
                let cv = self.value(*c);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let s = cv.data()[i];
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*c) {
                    let av = self.value(*a);
                    let gc = Tensor::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    });
                    self.accumulate(grads, *c, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| if yv > 0.0 { gv * 0.5 / yv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.rows(), g.cols(), data).unwrap());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let d = xhat.cols();
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, column_sums(&hadamard(g, xhat)));
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(xhat.rows(), d);
                    for (i, &s) in inv_std.iter().enumerate() {
                        let (gr, hr) = (g.row(i), xhat.row(i));
                        let dh: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = s / d as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = k * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let gp = Tensor::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let gp = Tensor::from_fn(r, g.cols(), |i, j| g.get(off + i, j));
                        self.accumulate(grads, p, gp);
                    }
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Trace(a) => {
                let n = self.shape(*a)[0];
                let mut ga = Tensor::eye(n);
                ga.scale_assign(g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|v| v / d));
                }
                if self.rg(*s) {
                    let av = self.value(*a);
                    let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-dot / (d * d)));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let v = gl.get(i, y);
                    gl.set(i, y, v - 1.0);
                }
                gl.scale_assign(g.item() / n);
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or was not tracked.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per stored parameter, in store order. Parameters the
    /// loss never touched get a zero gradient of the right shape.
    pub fn params(&self, tape: &Tape<'_>) -> Vec<Tensor> {
        let Some(store) = tape.params else {
            return Vec::new();
        };
        store
            .ids()
            .map(|id| {
                tape.param_vars[id.0]
                    .and_then(|v| self.wrt(v).cloned())
                    .unwrap_or_else(|| {
                        let [r, c] = store.get(id).shape();
                        Tensor::zeros(r, c)
                    })
            })
            .collect()
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
