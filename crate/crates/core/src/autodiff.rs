//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, so the tape is always in
//! topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use rdml::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Broadcasting is limited to a rank-0 scalar against any tensor, plus the
//! dedicated [`Tape::add_row`] for bias rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    LogSumExp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Log(Var),
    Exp(Var),
    Pow(Var, f64),
    Relu(Var),
    Maximum(Var, Var),
    Clamp(Var, f64, f64),
    Reduce(Reduce, Var, Option<usize>),
    LogSoftmax(Var),
    AddRow(Var, Var),
    // out[i] = log(sum_m exp(alpha*lp + (1-alpha)*lq)) / (alpha - 1); weights are the
    // row softmax of that exponent, kept for the backward pass.
    RenyiRows {
        lp: Var,
        lq: Var,
        alpha: f64,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: &[Var], node_op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: node_op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (ta.dims2(), tb.dims2()) else {
            return Err(shape_err("matmul", ta, tb));
        };
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(shape_err(name, ta, tb));
        };
        self.push(name, out, &[a, b], Op::Binary(kind, a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, &[x], Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        let out = t.map(f64::ln);
        self.push("log", out, &[x], Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, &[x], Op::Exp(x))
    }

    pub fn pow(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.powf(c));
        self.push("pow", out, &[x], Op::Pow(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, &[x], Op::Relu(x))
    }

    /// Elementwise maximum of two same-shape tensors; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("maximum", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("maximum", out, &[a, b], Op::Maximum(a, b))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, &[x], Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    /// Max-shifted `log(sum(exp(x)))` over `axis`, or over everything.
    pub fn logsumexp(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::LogSumExp, x, axis)
    }

    fn reduce(&mut self, kind: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let name = match kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::LogSumExp => "logsumexp",
        };
        let t = self.value(x);
        let (outer, len, inner, out_shape) = reduce_layout(name, t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|j| t.data()[(o * len + j) * inner + i]);
                out[o * inner + i] = match kind {
                    Reduce::Sum => lane.sum(),
                    Reduce::Mean => lane.sum::<f64>() / len as f64,
                    Reduce::LogSumExp => {
                        let max = lane.clone().fold(f64::NEG_INFINITY, f64::max);
                        if max.is_finite() {
                            max + lane.map(|v| (v - max).exp()).sum::<f64>().ln()
                        } else {
                            max
                        }
                    }
                };
            }
        }
        self.push(
            name,
            Tensor::from_parts(out_shape, out),
            &[x],
            Op::Reduce(kind, x, axis),
        )
    }

    /// Row-wise log-softmax of a matrix, computed through a max-shifted logsumexp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "log_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let mut data = Vec::with_capacity(t.len());
        for row in t.rows() {
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("log_softmax", out, &[x], Op::LogSoftmax(x))
    }

    /// Adds a length-`m` row vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let Some((_, m)) = tx.dims2() else {
            return Err(shape_err("add_row", tx, tr));
        };
        if tr.len() != m || tr.rank() != 1 {
            return Err(shape_err("add_row", tx, tr));
        }
        let b = tr.data();
        let data = tx
            .data()
            .chunks(m)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_row", out, &[x, row], Op::AddRow(x, row))
    }

    /// Per-row Rényi divergence `D_alpha(P || Q)` from normalized row
    /// log-probabilities `lp` and `lq`, in nats.
    ///
    /// `alpha` must not be 1; the caller routes that case to KL.
    pub fn renyi_rows(&mut self, lp: Var, lq: Var, alpha: f64) -> Result<Var> {
        let (tp, tq) = (self.value(lp), self.value(lq));
        if tp.shape() != tq.shape() || tp.rank() != 2 {
            return Err(shape_err("renyi", tp, tq));
        }
        if !(alpha.is_finite() && alpha >= 0.0) || alpha == 1.0 {
            return Err(Error::InvalidAlpha(alpha));
        }
        let (n, m) = tp.dims2().expect("rank checked");
        let mut out = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n * m);
        let mut exponent = vec![0.0; m];
        let mut tilt = vec![0.0; m];
        for (rp, rq) in tp.rows().zip(tq.rows()) {
            for j in 0..m {
                tilt[j] = (1.0 - alpha) * (rq[j] - rp[j]);
                exponent[j] = rp[j] + tilt[j];
            }
            let lse = logsumexp_slice(&exponent);
            // Near alpha = 1 the log-sum is O(alpha - 1); log1p/expm1 keeps its relative precision.
            let log_sum = if tilt.iter().all(|t| t.abs() <= 1.0) {
                let s: f64 = rp.iter().zip(&tilt).map(|(lp, t)| lp.exp() * t.exp_m1()).sum();
                s.ln_1p()
            } else {
                lse
            };
            out.push(log_sum / (alpha - 1.0));
            weights.extend(exponent.iter().map(|e| (e - lse).exp()));
        }
        let weights = Tensor::from_parts(vec![n, m], weights);
        self.push(
            "renyi",
            Tensor::from_parts(vec![n], out),
            &[lp, lq],
            Op::RenyiRows { lp, lq, alpha, weights },
        )
    }

    /// Reverse sweep from a scalar root. Allowed once per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(root_value.shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.backward_rule(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = g.data().iter().zip(a.data()).map(|(&gi, &ai)| f(gi, ai)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2().expect("matmul lhs");
                let n = tb.shape()[1];
                let bt = transpose(tb.data(), k, n);
                let at = transpose(ta.data(), m, k);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], matmul_raw(g.data(), &bt, m, n, k))),
                    (*b, Tensor::from_parts(vec![k, n], matmul_raw(&at, g.data(), k, m, n))),
                ]
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let other_at = |t: &Tensor, i: usize| if t.is_scalar() { t.data()[0] } else { t.data()[i] };
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let (x, y) = (other_at(ta, i), other_at(tb, i));
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y, x),
                    };
                    ga[i] = gi * da;
                    gb[i] = gi * db;
                }
                let fold = |t: &Tensor, grad: Vec<f64>| {
                    if t.shape() == out.shape() {
                        Tensor::from_parts(t.shape().to_vec(), grad)
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), vec![grad.iter().sum()])
                    }
                };
                vec![(*a, fold(ta, ga)), (*b, fold(tb, gb))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Log(x) => vec![(*x, zip_map(val(*x), &|gi, xi| gi / xi))],
            Op::Exp(x) => vec![(*x, zip_map(out, &|gi, yi| gi * yi))],
            Op::Pow(x, c) => vec![(*x, zip_map(val(*x), &|gi, xi| gi * c * xi.powf(c - 1.0)))],
            Op::Relu(x) => vec![(*x, zip_map(val(*x), &|gi, xi| if xi > 0.0 { gi } else { 0.0 }))],
            Op::Maximum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if ta.data()[i] >= tb.data()[i] {
                        ga[i] = g.data()[i];
                    } else {
                        gb[i] = g.data()[i];
                    }
                }
                vec![
                    (*a, Tensor::from_parts(ta.shape().to_vec(), ga)),
                    (*b, Tensor::from_parts(tb.shape().to_vec(), gb)),
                ]
            }
            Op::Clamp(x, lo, hi) => {
                vec![(
                    *x,
                    zip_map(val(*x), &|gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
                )]
            }
            Op::Reduce(kind, x, axis) => {
                let tx = val(*x);
                let (outer, len, inner, _) = reduce_layout("reduce", tx.shape(), *axis).expect("validated in forward");
                let mut gx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g.data()[o * inner + i];
                        let oi = out.data()[o * inner + i];
                        for j in 0..len {
                            let pos = (o * len + j) * inner + i;
                            gx[pos] = match kind {
                                Reduce::Sum => gi,
                                Reduce::Mean => gi / len as f64,
                                Reduce::LogSumExp => gi * (tx.data()[pos] - oi).exp(),
                            };
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(tx.shape().to_vec(), gx))]
            }
            Op::LogSoftmax(x) => {
                let m = out.shape()[1];
                let mut gx = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks(m).zip(out.data().chunks(m)) {
                    let total: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gi, yi)| gi - yi.exp() * total));
                }
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), gx))]
            }
            Op::AddRow(x, row) => {
                let m = out.shape()[1];
                let mut gb = vec![0.0; m];
                for grow in g.data().chunks(m) {
                    gb.iter_mut().zip(grow).for_each(|(b, v)| *b += v);
                }
                vec![(*x, g.clone()), (*row, Tensor::from_parts(vec![m], gb))]
            }
            Op::RenyiRows { lp, lq, alpha, weights } => {
                let (n, m) = weights.dims2().expect("weights are a matrix");
                let coef_p = alpha / (alpha - 1.0);
                let mut gp = Vec::with_capacity(n * m);
                let mut gq = Vec::with_capacity(n * m);
                for (gi, wrow) in g.data().iter().zip(weights.data().chunks(m)) {
                    gp.extend(wrow.iter().map(|w| gi * coef_p * w));
                    gq.extend(wrow.iter().map(|w| -gi * w));
                }
                vec![
                    (*lp, Tensor::from_parts(vec![n, m], gp)),
                    (*lq, Tensor::from_parts(vec![n, m], gq)),
                ]
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn reduce_layout(op: &'static str, shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, Vec::new())),
        Some(axis) if axis < shape.len() => {
            let outer = shape[..axis].iter().product();
            let inner = shape[axis + 1..].iter().product();
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Ok((outer, shape[axis], inner, out_shape))
        }
        Some(axis) => Err(Error::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        }),
    }
}

pub(crate) fn logsumexp_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let left = tape.matmul(i, a).unwrap();
        let right = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(left), tape.value(a));
        assert_eq!(tape.value(right).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.7));
        let e = tape.exp(x).unwrap();
        let l = tape.log(e).unwrap();
        assert!(close(tape.value(l).data()[0], 0.7, 1e-15));
        let p = tape.pow(x, 1.0).unwrap();
        assert_eq!(tape.value(p).data()[0], 0.7);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn broadcasting_only_for_scalars() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.param(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.add(a, b).is_err());
        let prod = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(prod).data(), &[2.0, 4.0, 6.0]);
        let total = tape.sum(prod, None).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(v, None).unwrap();
        assert_eq!(tape.value(s).data(), &[6.0]);
        let m = tape.constant(Tensor::from_rows(&[[1.0, 3.0], [3.0, 5.0]]).unwrap());
        let col_mean = tape.mean(m, Some(0)).unwrap();
        assert_eq!(tape.value(col_mean).data(), &[2.0, 4.0]);
        assert!(matches!(
            tape.sum(m, Some(2)),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]));
        let m = tape.mean(x, None).unwrap();
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn log_softmax_uniform_and_shift_invariant() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let ls = tape.log_softmax(z).unwrap();
        for &v in tape.value(ls).data() {
            assert!(close(v, -std::f64::consts::LN_2, 1e-15));
        }
        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[101.0, 102.0, 103.0]]).unwrap());
        let la = tape.log_softmax(a).unwrap();
        let lb = tape.log_softmax(b).unwrap();
        for (x, y) in tape.value(la).data().iter().zip(tape.value(lb).data()) {
            assert!(close(*x, *y, 1e-12));
        }
        let total: f64 = tape.value(la).data().iter().map(|v| v.exp()).sum();
        assert!(close(total, 1.0, 1e-12));
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap());
        assert!(matches!(tape.log_softmax(z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(x, None).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        // a failed call leaves the tape usable
        let s = tape.sum(x, None).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn reused_node_accumulates() {
        // x*x + x, used three times
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y, None).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn clamp_and_maximum_gate_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-2.0, 0.5, 3.0]));
        let floor = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let m = tape.maximum(x, floor).unwrap();
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        let both = tape.add(m, c).unwrap();
        let s = tape.sum(both, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn renyi_rows_rejects_alpha_one() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[[0.5f64.ln(), 0.5f64.ln()]]).unwrap());
        assert!(matches!(tape.renyi_rows(p, p, 1.0), Err(Error::InvalidAlpha(_))));
        assert!(matches!(tape.renyi_rows(p, p, -0.5), Err(Error::InvalidAlpha(_))));
    }
}
