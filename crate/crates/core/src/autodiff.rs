//! Define-by-run reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Node indices are assigned
//! in creation order, so the tape is already topologically sorted and the backward
//! pass is a single reverse sweep. A tape supports exactly one backward pass; build a
//! new one for the next step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    Sum(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, keep: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached by the backward pass.
    /// Every leaf has an entry (zero when the loss does not depend on it).
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Returns true when `b` can be added to `a`: same shape, or `b` is a single row
/// broadcast over the rows of `a`.
fn broadcastable(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols())
}

fn broadcast_zip(a: &Matrix, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if !broadcastable(a, b) {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let mut out = a.clone();
    let cols = a.cols();
    let bs = b.as_slice();
    let broadcast = b.rows() == 1 && a.rows() != 1;
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let bv = if broadcast { bs[i % cols] } else { bs[i] };
        *o = f(*o, bv);
    }
    Ok(out)
}

/// Collapses a gradient of `a`'s shape onto `b`'s shape (sums rows when `b` was broadcast).
fn reduce_to(grad: Matrix, target: (usize, usize)) -> Matrix {
    if grad.shape() == target {
        return grad;
    }
    let mut out = Matrix::zeros(target.0, target.1);
    for r in 0..grad.rows() {
        for (o, g) in out.as_mut_slice().iter_mut().zip(grad.row(r)) {
            *o += g;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward; build a new graph".into()));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op_name(&op))));
        }
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf: receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true).expect("leaf values must be finite on a live tape")
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false).expect("constant values must be finite on a live tape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulBt(a, b), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Elementwise sum; `b` may be a `1 × cols` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), value, rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Hadamard(a, b), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), value, rg)
    }

    /// Per-row layer normalization followed by a `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, cols) {
                return Err(Error::dim("layer_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut value = xhat.clone();
        for r in 0..rows {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows_value(self.value(a));
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    /// Mean cross-entropy of row-wise logits against class labels; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::dim("cross_entropy", lv.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Input(format!("label {bad} out of range for {} classes", lv.cols())));
        }
        let probs = softmax_rows_value(lv);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            loss += lse - row[l];
        }
        let value = Matrix::filled(1, 1, loss / labels.len() as f64);
        let rg = self.rg(logits);
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Rows `[start, start + count)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let av = self.value(a);
        if count == 0 || start + count > av.rows() {
            return Err(Error::dim("slice_rows", av.shape(), (start + count, av.cols())));
        }
        let value = av.submatrix(start, 0, count, av.cols());
        let rg = self.rg(a);
        self.push(Op::SliceRows { x: a, start }, value, rg)
    }

    /// Columns `[start, start + count)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let av = self.value(a);
        if count == 0 || start + count > av.cols() {
            return Err(Error::dim("slice_cols", av.shape(), (av.rows(), start + count)));
        }
        let value = av.submatrix(0, start, av.rows(), count);
        let rg = self.rg(a);
        self.push(Op::SliceCols { x: a, start }, value, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::dim("concat_rows", (rows, cols), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), value, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::dim("concat_cols", (rows, cols), pv.shape()));
            }
            cols += pv.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            value.set_submatrix(0, offset, pv);
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Input(format!("row id {bad} out of range for table with {} rows", tv.rows())));
        }
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let value = Matrix::from_vec(ids.len(), tv.cols(), data)?;
        let rg = self.rg(table);
        self.push(Op::Gather { table, ids: ids.to_vec() }, value, rg)
    }

    /// Keeps entries where `keep` is true and replaces the rest by the constant `fill`.
    /// Gradients flow only through kept entries.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.len() {
            return Err(Error::dim("masked_fill", av.shape(), (keep.len(), 1)));
        }
        let mut value = av.clone();
        for (v, &k) in value.as_mut_slice().iter_mut().zip(keep) {
            if !k {
                *v = fill;
            }
        }
        let rg = self.rg(a);
        self.push(Op::MaskedFill { x: a, keep: keep.to_vec() }, value, rg)
    }

    /// Reverse sweep from a scalar `loss`. Can be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape; re-run the forward pass".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if grads[i].is_none() {
                    grads[i] = Some(Matrix::zeros_like(&node.value));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: Var, g: Matrix) -> Result<()> {
        if !self.rg(target) {
            return Ok(());
        }
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient during backward".into()));
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.matmul_at(self.value(*a))?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*b) {
                    let gb = reduce_to(g.scale(sign), self.value(*b).shape());
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    let ga = broadcast_zip(g, self.value(*b), "hadamard", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = g.hadamard(self.value(*a))?;
                    self.accumulate(grads, *b, reduce_to(gb, self.value(*b).shape()))?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Gelu(a) => {
                let ga = self.value(*a).zip_map(g, "gelu", |x, gv| gv * gelu_grad(x))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = xhat.shape();
                let gain_v = self.value(*gain).as_slice();
                if self.rg(*gain) {
                    self.accumulate(grads, *gain, reduce_to(g.hadamard(xhat)?, (1, cols)))?;
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, reduce_to(g.clone(), (1, cols)))?;
                }
                if self.rg(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros_like(y);
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[(0, 0)] / labels.len() as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[(r, l)] -= 1.0;
                }
                self.accumulate(grads, *logits, gl.scale(scale))?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g[(0, 0)]))?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros_like(xv);
                gx.set_submatrix(*start, 0, g);
                self.accumulate(grads, *x, gx)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros_like(xv);
                gx.set_submatrix(0, *start, g);
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.submatrix(offset, 0, r, c))?;
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.submatrix(0, offset, r, c))?;
                    }
                    offset += c;
                }
            }
            Op::Gather { table, ids } => {
                let mut gt = Matrix::zeros_like(self.value(*table));
                for (r, &i) in ids.iter().enumerate() {
                    for (o, gv) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::MaskedFill { x, keep } => {
                let mut gx = g.clone();
                for (v, &k) in gx.as_mut_slice().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::MatMulBt(..) => "matmul_bt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Gather { .. } => "gather_rows",
        Op::MaskedFill { .. } => "masked_fill",
    }
}

/// Central-difference check of an analytic gradient.
///
/// `f` returns the scalar value and its analytic gradient at a point. The result is the
/// maximum over entries of `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, at: &Matrix, step: f64) -> Result<f64>
where
    F: FnMut(&Matrix) -> Result<(f64, Matrix)>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (value, analytic) = f(at)?;
    if !value.is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    at.same_shape(&analytic, "grad_check")?;
    let mut probe = at.clone();
    let mut worst: f64 = 0.0;
    for i in 0..at.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let (plus, _) = f(&probe)?;
        probe.as_mut_slice()[i] = orig - step;
        let (minus, _) = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric("function value is not finite".into()));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.as_slice()[i];
        let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
