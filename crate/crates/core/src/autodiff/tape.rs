//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and the backward sweep is a single
//! reverse pass. Nodes that do not depend on any gradient-requiring leaf are
//! skipped entirely during the sweep.

use super::tensor::{kernels, Tensor};
use super::{AutodiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Column(Var, usize),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSumExp(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Embedding { table: Var, indices: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    TopkGate { probs: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn log_sum_exp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies row `t` of `x` by the scalar `s[t]`, with `s` shaped `T × 1`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                left: xv.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (t, chunk) in data.chunks_mut(c).enumerate() {
            let f = sv.data()[t];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    /// Extracts column `j` as a `T × 1` tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "column",
                index: j,
                bound: xv.cols(),
            });
        }
        let data: Vec<f64> = (0..xv.rows()).map(|t| xv.get(t, j)).collect();
        let out = Tensor::matrix(xv.rows(), 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Column(x, j), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![0.0; xv.numel()];
        for (row, out) in xv.data().chunks(c).zip(data.chunks_mut(c)) {
            softmax_into(row, out);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `ln Σ exp(y)` over all entries.
    pub fn log_sum_exp(&mut self, y: Var) -> Var {
        let out = Tensor::scalar(log_sum_exp_slice(self.value(y).data()));
        let rg = self.rg(&[y]);
        self.push(out, Op::LogSumExp(y), rg)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = (lv.rows(), lv.cols());
        if targets.len() != t {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (i, (row, out)) in lv.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            softmax_into(row, out);
            total += log_sum_exp_slice(row) - row[targets[i]];
        }
        let probs = Tensor::matrix(t, v, probs)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / t as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row lookup into `table`; `None` yields a zero row (left padding).
    pub fn embedding(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut data = vec![0.0; indices.len() * d];
        for (out, idx) in data.chunks_mut(d).zip(indices) {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "embedding",
                        index: i,
                        bound: rows,
                    });
                }
                out.copy_from_slice(tv.row(i));
            }
        }
        let out = Tensor::matrix(indices.len(), d, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                left: self.value(parts[0]).shape().to_vec(),
                right: self.value(*bad).shape().to_vec(),
            });
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start .. start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "rows",
                index: start + len,
                bound: xv.rows(),
            });
        }
        let c = xv.cols();
        let out = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rows(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Column means of a `T × n` tensor, shaped `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (t, c) = (v.rows(), v.cols());
        let mut data = vec![0.0; c];
        for row in v.data().chunks(c) {
            for (d, r) in data.iter_mut().zip(row) {
                *d += r;
            }
        }
        data.iter_mut().for_each(|d| *d /= t as f64);
        let out = Tensor::matrix(1, c, data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Keeps the masked entries of each probability row and renormalizes
    /// them to sum to one; unmasked entries become zero.
    pub fn topk_gate(&mut self, probs: Var, mask: &[bool]) -> Result<Var> {
        let pv = self.value(probs);
        if mask.len() != pv.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "topk_gate",
                left: pv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let c = pv.cols();
        let mut data = vec![0.0; pv.numel()];
        for ((row, m), out) in pv.data().chunks(c).zip(mask.chunks(c)).zip(data.chunks_mut(c)) {
            let s: f64 = row.iter().zip(m).filter(|(_, &k)| k).map(|(p, _)| p).sum();
            for ((o, p), &k) in out.iter_mut().zip(row).zip(m) {
                if k {
                    *o = p / s;
                }
            }
        }
        let out = Tensor::new(pv.shape().to_vec(), data)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::TopkGate {
                probs,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Accumulates into the input's gradient, allocating zeros on first touch.
    fn with_grad<F: FnOnce(&mut [f64])>(&self, grads: &mut [Option<Tensor>], v: Var, f: F) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.with_grad(grads, *a, |ga| kernels::matmul_nt(g.data(), bv.data(), ga, m, n, k));
                self.with_grad(grads, *b, |gb| kernels::matmul_tn(av.data(), g.data(), gb, m, k, n));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.with_grad(grads, *a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * y;
                    }
                });
                self.with_grad(grads, *b, |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                self.with_grad(grads, *x, |gx| {
                    for (t, (o, gr)) in gx.chunks_mut(c).zip(g.data().chunks(c)).enumerate() {
                        let f = sv.data()[t];
                        for (oi, gi) in o.iter_mut().zip(gr) {
                            *oi += gi * f;
                        }
                    }
                });
                self.with_grad(grads, *s, |gs| {
                    for (t, (xr, gr)) in xv.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                        gs[t] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Column(x, j) => {
                let c = self.value(*x).cols();
                self.with_grad(grads, *x, |gx| {
                    for (t, gi) in g.data().iter().enumerate() {
                        gx[t * c + j] += gi;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.with_grad(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                self.with_grad(grads, *x, |gx| {
                    for ((o, yr), gr) in gx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((oi, yi), gi) in o.iter_mut().zip(yr).zip(gr) {
                            *oi += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(y) => {
                let yv = self.value(*y);
                let mut p = vec![0.0; yv.numel()];
                softmax_into(yv.data(), &mut p);
                let gs = g.item();
                self.with_grad(grads, *y, |gy| {
                    for (o, pi) in gy.iter_mut().zip(&p) {
                        *o += gs * pi;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = probs.cols();
                let scale = g.item() / targets.len() as f64;
                self.with_grad(grads, *logits, |gl| {
                    for (t, (o, pr)) in gl.chunks_mut(v).zip(probs.data().chunks(v)).enumerate() {
                        for (oi, pi) in o.iter_mut().zip(pr) {
                            *oi += scale * pi;
                        }
                        o[targets[t]] -= scale;
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).cols();
                self.with_grad(grads, *table, |gt| {
                    for (idx, gr) in indices.iter().zip(g.data().chunks(d)) {
                        if let Some(i) = idx {
                            for (o, gi) in gt[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *o += gi;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.with_grad(grads, *p, |gp| {
                        for (o, gr) in gp.chunks_mut(c).zip(g.data().chunks(total)) {
                            for (oi, gi) in o.iter_mut().zip(&gr[offset..offset + c]) {
                                *oi += gi;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.with_grad(grads, *p, |gp| {
                        for (o, gi) in gp.iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::Rows(x, start) => {
                let c = self.value(*x).cols();
                self.with_grad(grads, *x, |gx| {
                    for (o, gi) in gx[start * c..].iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
            }
            Op::Sum(x) => {
                let gs = g.item();
                self.with_grad(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gs));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let gs = g.item() / n;
                self.with_grad(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gs));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (t, c) = (xv.rows(), xv.cols());
                self.with_grad(grads, *x, |gx| {
                    for o in gx.chunks_mut(c) {
                        for (oi, gi) in o.iter_mut().zip(g.data()) {
                            *oi += gi / t as f64;
                        }
                    }
                });
            }
            Op::TopkGate { probs, mask } => {
                let pv = self.value(*probs);
                let w = &node.value;
                let c = pv.cols();
                self.with_grad(grads, *probs, |gp| {
                    for (t, o) in gp.chunks_mut(c).enumerate() {
                        let row = &pv.data()[t * c..(t + 1) * c];
                        let m = &mask[t * c..(t + 1) * c];
                        let wr = &w.data()[t * c..(t + 1) * c];
                        let gr = &g.data()[t * c..(t + 1) * c];
                        let s: f64 = row.iter().zip(m).filter(|(_, &k)| k).map(|(p, _)| p).sum();
                        let dot: f64 = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            if m[j] {
                                o[j] += (gr[j] - dot) / s;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is not
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
