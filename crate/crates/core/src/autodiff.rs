//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already a topological order and backward is a single reverse sweep.
//! Parameters enter the tape as leaves copied from a [`ParamStore`]; their
//! gradients come back as a [`Gradients`] that the caller accumulates, which
//! lets independent tapes run on separate threads against the same store.

use std::collections::HashSet;

use crate::error::{invalid, Result, TraceError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Rope { x: Var, angles: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LogSumExpRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Grads {
    /// Gradient with respect to any node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients, summed over every leaf copy of the same parameter.
    pub fn params(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::new(store);
        for &(node, id) in &self.params {
            if let Some(g) = &self.nodes[node] {
                out.accumulate(id, g);
            }
        }
        out
    }
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: HashSet<ParamId>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TraceError {
    TraceError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Rotary angle of feature pair `m` at position `pos`.
pub fn rope_angle(pos: f64, m: usize, head_width: usize, base: f64) -> f64 {
    pos * base.powf(-2.0 * m as f64 / head_width as f64)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters listed here enter the tape as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if self.frozen.contains(&id) {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param(id), true)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (r, c) = matrix_dims("matmul", tb)?;
        let (kb, n) = if b_trans { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, ta.data(), false, tb.data(), b_trans, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, b_trans }, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a length-`n` bias to every row of an `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(a, b)| *a += b);
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Row-wise softmax over the last axis with an optional additive mask of
    /// `0`/`-inf` entries. The mask shape must be a suffix of `x`'s shape.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = mask {
            let (xs, ms) = (tx.shape(), m.shape());
            if ms.len() > xs.len() || xs[xs.len() - ms.len()..] != *ms {
                return Err(shape_err("softmax", tx, m));
            }
        }
        let n = tx.cols();
        let mut out = tx.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            if let Some(m) = mask {
                let mrows = m.numel() / n;
                let mrow = m.row(r % mrows);
                row.iter_mut().zip(mrow).for_each(|(a, b)| *a += b);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(invalid("softmax", format!("row {r} is fully masked")));
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let (_, n) = matrix_dims("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_rows", t)?;
            if c != n {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let (m, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_cols", t)?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..m {
                data[r * n + off..r * n + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let v = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("slice_rows", t)?;
        if len == 0 || start + len > m {
            return Err(invalid(
                "slice_rows",
                format!("rows {start}..{} out of {m}", start + len),
            ));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("slice_cols", t)?;
        if len == 0 || start + len > n {
            return Err(invalid(
                "slice_cols",
                format!("cols {start}..{} out of {n}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceCols { x, start }, rg))
    }

    /// Selects rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("gather_rows", t)?;
        if idx.is_empty() {
            return Err(invalid("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(invalid("gather_rows", format!("row {i} out of {m}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Selects flat elements into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of {}", t.numel()),
            ));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("transpose", t)?;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = t.data()[r * n + c];
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error over the entries where `mask` is set.
    pub fn mse(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("mse", tp, tt));
        }
        if mask.len() != tp.numel() {
            return Err(invalid(
                "mse",
                format!("mask length {} for {} entries", mask.len(), tp.numel()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("mse", "element mask selects no entries"));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t).powi(2))
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(s / count as f64),
            Op::Mse {
                pred,
                target,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Rotary position encoding on the last axis of a `[.., len, width]`
    /// tensor. Row `l` of every leading block is rotated by `positions[l]`;
    /// features are rotated in adjacent (even, odd) pairs.
    pub fn rope(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let t = self.value(x);
        let w = t.cols();
        if w % 2 != 0 {
            return Err(invalid("rope", format!("odd feature width {w}")));
        }
        let len = positions.len();
        if len == 0 || t.rows() % len != 0 {
            return Err(invalid(
                "rope",
                format!("{} positions for {} rows", len, t.rows()),
            ));
        }
        let half = w / 2;
        let mut angles = vec![0.0; len * half];
        for (l, &p) in positions.iter().enumerate() {
            for m in 0..half {
                angles[l * half + m] = rope_angle(p, m, w, base);
            }
        }
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(w).enumerate() {
            let a = &angles[(r % len) * half..(r % len + 1) * half];
            for m in 0..half {
                let (s, c) = a[m].sin_cos();
                let (x0, x1) = (row[2 * m], row[2 * m + 1]);
                row[2 * m] = x0 * c - x1 * s;
                row[2 * m + 1] = x0 * s + x1 * c;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Rope { x, angles }, rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(n) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// `log Σ exp` over the last axis, one value per row.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t
            .data()
            .chunks(t.cols())
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Tensor::new(vec![out.len()], out).expect("rows > 0");
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSumExpRows(x), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", t.shape()),
            ));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Grads> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.len() != node.value.numel() {
                return Err(invalid(
                    "backward",
                    format!("seed of length {} for {:?}", g.len(), node.value.shape()),
                ));
            }
            acc(&mut grads[v.0], g);
            start = start.max(v.0 + 1);
        }
        let mut params = Vec::new();
        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                params.push((i, id));
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, b_trans } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if rg(a) {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let mut da = vec![0.0; m * k];
                    gemm_acc(m, n, k, g, false, tb.data(), !b_trans, &mut da);
                    acc(&mut grads[a.0], &da);
                }
                if rg(b) {
                    let mut db = vec![0.0; k * n];
                    if *b_trans {
                        // B is n×k: dB = dCᵀ · A
                        gemm_acc(n, m, k, g, true, ta.data(), false, &mut db);
                    } else {
                        gemm_acc(k, m, n, ta.data(), true, g, false, &mut db);
                    }
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    acc(&mut grads[a.0], g);
                }
                if rg(b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    acc(&mut grads[a.0], g);
                }
                if rg(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if rg(a) {
                    let d: Vec<f64> = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(&mut grads[a.0], &d);
                }
                if rg(b) {
                    let d: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(&mut grads[a.0], &d);
            }
            Op::AddBias(x, bias) => {
                if rg(x) {
                    acc(&mut grads[x.0], g);
                }
                if rg(bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(&mut grads[bias.0], &db);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d: Vec<f64> = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                acc(&mut grads[x.0], &d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let tg = self.value(*gain).data();
                if rg(x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(tg).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                }
                if rg(gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(&mut grads[gain.0], &dg);
                }
                if rg(bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc(&mut grads[bias.0], &db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if rg(p) {
                        acc(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let w = t.cols();
                    if rg(p) {
                        let mut d = Vec::with_capacity(t.numel());
                        for row in g.chunks(n) {
                            d.extend_from_slice(&row[off..off + w]);
                        }
                        acc(&mut grads[p.0], &d);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let n = t.cols();
                let mut d = vec![0.0; t.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                acc(&mut grads[x.0], &d);
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let n = t.cols();
                let w = node.value.cols();
                let mut d = vec![0.0; t.numel()];
                for (r, row) in g.chunks(w).enumerate() {
                    d[r * n + start..r * n + start + w].copy_from_slice(row);
                }
                acc(&mut grads[x.0], &d);
            }
            Op::GatherRows { x, idx } => {
                let t = self.value(*x);
                let n = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (row, &i) in g.chunks(n).zip(idx) {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                acc(&mut grads[x.0], &d);
            }
            Op::Gather { x, idx } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gv, &i) in g.iter().zip(idx) {
                    d[i] += gv;
                }
                acc(&mut grads[x.0], &d);
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[1], node.value.shape()[0]);
                // output is n×m; input m×n
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = g[c * m + r];
                    }
                }
                acc(&mut grads[x.0], &d);
            }
            Op::Reshape(x) => acc(&mut grads[x.0], g),
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                acc(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![g[0] / n as f64; n];
                acc(&mut grads[x.0], &d);
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let s = 2.0 * g[0] / *count as f64;
                let d: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .zip(mask)
                    .map(|((p, t), &m)| if m { s * (p - t) } else { 0.0 })
                    .collect();
                if rg(target) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    acc(&mut grads[target.0], &neg);
                }
                if rg(pred) {
                    acc(&mut grads[pred.0], &d);
                }
            }
            Op::Rope { x, angles } => {
                let w = node.value.cols();
                let half = w / 2;
                let len = angles.len() / half;
                let mut d = g.to_vec();
                for (r, row) in d.chunks_mut(w).enumerate() {
                    let a = &angles[(r % len) * half..(r % len + 1) * half];
                    for m in 0..half {
                        let (s, c) = a[m].sin_cos();
                        let (g0, g1) = (row[2 * m], row[2 * m + 1]);
                        row[2 * m] = g0 * c + g1 * s;
                        row[2 * m + 1] = -g0 * s + g1 * c;
                    }
                }
                acc(&mut grads[x.0], &d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for (r, nr) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gr[j] - yr[j] * s) / nr;
                    }
                }
                acc(&mut grads[x.0], &d);
            }
            Op::LogSumExpRows(x) => {
                let t = self.value(*x);
                let n = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (r, row) in t.data().chunks(n).enumerate() {
                    let lse = node.value.data()[r];
                    for j in 0..n {
                        d[r * n + j] = g[r] * (row[j] - lse).exp();
                    }
                }
                acc(&mut grads[x.0], &d);
            }
        }
    }
}

fn acc(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *slot = Some(g.to_vec()),
    }
}
