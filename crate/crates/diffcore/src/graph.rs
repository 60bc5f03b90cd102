//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes are
//! appended after their parents, so walking the tape backwards is already a
//! topological order. Gradients of shared subexpressions accumulate
//! additively. [`Graph::backward`] releases the tape; a second call is an
//! error.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm, normalize_rows, normalize_rows_backward, ConvGeom};
use crate::tensor::{axis_split, Tensor};

/// Norm floor used by [`Graph::l2_normalize`] and [`Graph::cosine_similarity`].
pub const NORM_EPS: f64 = 1e-8;

/// A differentiable operation defined outside the engine.
///
/// Implementors must ship a finite-difference test alongside the type; the
/// engine trusts the vector-Jacobian product it is handed.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian products with respect to each input. Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        a_hat: Vec<f64>,
        a_norms: Vec<f64>,
        b_hat: Vec<f64>,
        b_norms: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        axis: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Stack(Vec<Var>),
    Reshape(Var),
    Custom {
        func: Arc<dyn Function>,
        inputs: Vec<Var>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (da, db) = (a.data(), b.data());
    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
    Tensor::new(shape, data).expect("shape checked by caller")
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(grad: Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        grad
    } else {
        let s: f64 = grad.data().iter().sum();
        Tensor::new(target.to_vec(), vec![s]).expect("scalar operand")
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.check_live()?;
        let t = t.ensure_finite("leaf")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("add", ta, tb)?;
        let out = binary_map(ta, tb, shape, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    /// Elementwise product; either operand may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("mul", ta, tb)?;
        let out = binary_map(ta, tb, shape, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(factor))?;
        self.mul(a, c)
    }

    /// `a [.., K] · b [K, M] -> [.., M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.shape().last() != Some(&tb.shape()[0]) {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (k, m) = (tb.shape()[0], tb.shape()[1]);
        let rows = ta.numel() / k;
        let mut out = vec![0.0; rows * m];
        gemm(rows, k, m, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(shape, out)?;
        self.push(Op::MatMul(a, b), out, &[a, b], "matmul")
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_live()?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}"));
        }
        if tb.shape() != [ws[0]] {
            return shape_err("conv2d", format!("bias {:?} for {} filters", tb.shape(), ws[0]));
        }
        let (n, o) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad).ok_or_else(|| {
            Error::Invalid {
                op: "conv2d",
                detail: format!("kernel {} stride {stride} pad {pad} on {xs:?}", ws[2]),
            }
        })?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_sz = xs[1] * xs[2] * xs[3];
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; n * o * cols_n];
        for (img, dst) in tx.data().chunks_exact(in_sz).zip(out.chunks_exact_mut(o * cols_n)) {
            geom.im2col(img, &mut cols);
            for (f, chunk) in dst.chunks_exact_mut(cols_n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = tb.data()[f]);
            }
            gemm(o, rows, cols_n, tw.data(), false, &cols, false, dst, 1.0);
        }
        let out = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        self.push(Op::Conv2d { x, w, b, geom }, out, &[x, w, b], "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out, &[x], "relu")
    }

    /// Affine map `x [N, in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return shape_err("linear", format!("{:?} x {:?}", tx.shape(), tw.shape()));
        }
        let (n, k, m) = (tx.shape()[0], tw.shape()[0], tw.shape()[1]);
        if tb.shape() != [m] {
            return shape_err("linear", format!("bias {:?} for width {m}", tb.shape()));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        gemm(n, k, m, tx.data(), false, tw.data(), false, &mut out, 1.0);
        let out = Tensor::new(vec![n, m], out)?;
        self.push(Op::Linear { x, w, b }, out, &[x, w, b], "linear")
    }

    /// Normalizes along the last axis, dividing by `max(‖x‖, NORM_EPS)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let (y, norms) = normalize_rows(tx.data(), d, NORM_EPS);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        self.push(Op::L2Normalize { x, norms }, out, &[x], "l2_normalize")
    }

    /// Pairwise cosine similarity: `a [.., N, d]` against `b [M, d]` gives `[.., N, M]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let d = *ta.shape().last().unwrap();
        if tb.rank() != 2 || tb.shape()[1] != d {
            return shape_err("cosine_similarity", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let (rows, m) = (ta.numel() / d, tb.shape()[0]);
        let (a_hat, a_norms) = normalize_rows(ta.data(), d, NORM_EPS);
        let (b_hat, b_norms) = normalize_rows(tb.data(), d, NORM_EPS);
        let mut out = vec![0.0; rows * m];
        gemm(rows, d, m, &a_hat, false, &b_hat, true, &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(shape, out)?;
        let op = Op::Cosine {
            a,
            b,
            a_hat,
            a_norms,
            b_hat,
            b_norms,
        };
        self.push(op, out, &[a, b], "cosine_similarity")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut y = tx.data().to_vec();
        y.chunks_exact_mut(d).for_each(softmax_in_place);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        self.push(Op::Softmax(x), out, &[x], "softmax")
    }

    /// Unreduced cross entropy of `logits` along `axis` against class indices.
    ///
    /// `targets` lists one class per slice, in row-major order of the
    /// remaining axes; the output has the logits' shape with `axis` removed.
    pub fn cross_entropy(&mut self, logits: Var, axis: usize, targets: &[usize]) -> Result<Var> {
        self.check_live()?;
        let tl = self.value(logits);
        if axis >= tl.rank() {
            return shape_err("cross_entropy", format!("axis {axis} for {:?}", tl.shape()));
        }
        let (outer, k, inner) = axis_split(tl.shape(), axis);
        if targets.len() != outer * inner || targets.iter().any(|&t| t >= k) {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {outer}x{inner} slices of {k} classes", targets.len()),
            );
        }
        let data = tl.data();
        let mut probs = vec![0.0; data.len()];
        let mut losses = vec![0.0; outer * inner];
        let mut buf = vec![0.0; k];
        for o in 0..outer {
            for i in 0..inner {
                for (c, b) in buf.iter_mut().enumerate() {
                    *b = data[(o * k + c) * inner + i];
                }
                let t = targets[o * inner + i];
                let lse = log_sum_exp(&buf);
                losses[o * inner + i] = lse - buf[t];
                for (c, b) in buf.iter().enumerate() {
                    probs[(o * k + c) * inner + i] = (b - lse).exp();
                }
            }
        }
        let mut shape: Vec<usize> = tl.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, losses)?;
        let op = Op::CrossEntropy {
            logits,
            axis,
            targets: targets.to_vec(),
            probs,
        };
        self.push(op, out, &[logits], "cross_entropy")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out, &[x], "exp")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check_live()?;
        if !(lo <= hi) {
            return Err(Error::Invalid {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, out, &[x], "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x], "mean")
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let values: Vec<Tensor> = xs.iter().map(|v| self.value(*v).clone()).collect();
        let out = Tensor::stack(&values)?;
        self.push(Op::Stack(xs.to_vec()), out, xs, "stack")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), out, &[x], "reshape")
    }

    pub fn apply(&mut self, func: Arc<dyn Function>, inputs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = func.forward(&values)?;
        let name = func.name();
        let op = Op::Custom {
            func,
            inputs: inputs.to_vec(),
        };
        self.push(op, out, inputs, name)
    }

    /// Back-propagates from a scalar `loss` and releases the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (var, contrib) in backward_node(&nodes, node, &g)? {
                let contrib = contrib.ensure_finite("backward")?;
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        // Only leaves keep their gradient.
        for (idx, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let val = |v: Var| &nodes[v.0].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(nodes, v) {
                    out.push((v, unbroadcast(g.clone(), val(v).shape())));
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if needs(nodes, *a) {
                let ga = binary_map(g, tb, g.shape().to_vec(), |x, y| x * y);
                out.push((*a, unbroadcast(ga, ta.shape())));
            }
            if needs(nodes, *b) {
                let gb = binary_map(g, ta, g.shape().to_vec(), |x, y| x * y);
                out.push((*b, unbroadcast(gb, tb.shape())));
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (k, m) = (tb.shape()[0], tb.shape()[1]);
            let rows = ta.numel() / k;
            if needs(nodes, *a) {
                let mut ga = vec![0.0; rows * k];
                gemm(rows, m, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                out.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; k * m];
                gemm(k, rows, m, ta.data(), true, g.data(), false, &mut gb, 0.0);
                out.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let n = tx.shape()[0];
            let o = tw.shape()[0];
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let in_sz = geom.channels * geom.height * geom.width;
            let (nx, nw, nb) = (needs(nodes, *x), needs(nodes, *w), needs(nodes, *b));
            let mut gx = if nx { vec![0.0; tx.numel()] } else { Vec::new() };
            let mut gw = vec![0.0; if nw { tw.numel() } else { 0 }];
            let mut gb = vec![0.0; o];
            let mut cols = vec![0.0; rows * cols_n];
            let mut dcols = vec![0.0; rows * cols_n];
            for img in 0..n {
                let go = &g.data()[img * o * cols_n..(img + 1) * o * cols_n];
                if nb {
                    for (f, chunk) in go.chunks_exact(cols_n).enumerate() {
                        gb[f] += chunk.iter().sum::<f64>();
                    }
                }
                if nw {
                    geom.im2col(&tx.data()[img * in_sz..(img + 1) * in_sz], &mut cols);
                    gemm(o, cols_n, rows, go, false, &cols, true, &mut gw, 1.0);
                }
                if nx {
                    gemm(rows, o, cols_n, tw.data(), true, go, false, &mut dcols, 0.0);
                    geom.col2im_add(&dcols, &mut gx[img * in_sz..(img + 1) * in_sz]);
                }
            }
            if nx {
                out.push((*x, Tensor::new(tx.shape().to_vec(), gx)?));
            }
            if nw {
                out.push((*w, Tensor::new(tw.shape().to_vec(), gw)?));
            }
            if nb {
                out.push((*b, Tensor::new(vec![o], gb)?));
            }
        }
        Op::Relu(x) => {
            let gx = binary_map(g, val(*x), g.shape().to_vec(), |gv, xv| {
                if xv > 0.0 {
                    gv
                } else {
                    0.0
                }
            });
            out.push((*x, gx));
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (n, k, m) = (tx.shape()[0], tw.shape()[0], tw.shape()[1]);
            if needs(nodes, *x) {
                let mut gx = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, tw.data(), true, &mut gx, 0.0);
                out.push((*x, Tensor::new(vec![n, k], gx)?));
            }
            if needs(nodes, *w) {
                let mut gw = vec![0.0; k * m];
                gemm(k, n, m, tx.data(), true, g.data(), false, &mut gw, 0.0);
                out.push((*w, Tensor::new(vec![k, m], gw)?));
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((*b, Tensor::new(vec![m], gb)?));
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = *node.value.shape().last().unwrap();
            let gx = normalize_rows_backward(node.value.data(), norms, g.data(), d, NORM_EPS);
            out.push((*x, Tensor::new(val(*x).shape().to_vec(), gx)?));
        }
        Op::Cosine {
            a,
            b,
            a_hat,
            a_norms,
            b_hat,
            b_norms,
        } => {
            let (ta, tb) = (val(*a), val(*b));
            let d = tb.shape()[1];
            let (rows, m) = (ta.numel() / d, tb.shape()[0]);
            if needs(nodes, *a) {
                let mut ga_hat = vec![0.0; rows * d];
                gemm(rows, m, d, g.data(), false, b_hat, false, &mut ga_hat, 0.0);
                let ga = normalize_rows_backward(a_hat, a_norms, &ga_hat, d, NORM_EPS);
                out.push((*a, Tensor::new(ta.shape().to_vec(), ga)?));
            }
            if needs(nodes, *b) {
                let mut gb_hat = vec![0.0; m * d];
                gemm(m, rows, d, g.data(), true, a_hat, false, &mut gb_hat, 0.0);
                let gb = normalize_rows_backward(b_hat, b_norms, &gb_hat, d, NORM_EPS);
                out.push((*b, Tensor::new(tb.shape().to_vec(), gb)?));
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out_r) in y
                .chunks_exact(d)
                .zip(g.data().chunks_exact(d))
                .zip(gx.chunks_exact_mut(d))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    out_r[i] = yr[i] * (gr[i] - dot);
                }
            }
            out.push((*x, Tensor::new(node.value.shape().to_vec(), gx)?));
        }
        Op::CrossEntropy {
            logits,
            axis,
            targets,
            probs,
        } => {
            let tl = val(*logits);
            let (outer, k, inner) = axis_split(tl.shape(), *axis);
            let mut gl = probs.clone();
            for o in 0..outer {
                for i in 0..inner {
                    let slice = o * inner + i;
                    let gs = g.data()[slice];
                    for c in 0..k {
                        let idx = (o * k + c) * inner + i;
                        let hot = if c == targets[slice] { 1.0 } else { 0.0 };
                        gl[idx] = gs * (gl[idx] - hot);
                    }
                }
            }
            out.push((*logits, Tensor::new(tl.shape().to_vec(), gl)?));
        }
        Op::Exp(x) => {
            let gx = binary_map(g, &node.value, g.shape().to_vec(), |a, b| a * b);
            out.push((*x, gx));
        }
        Op::Clamp { x, lo, hi } => {
            let gx = binary_map(g, val(*x), g.shape().to_vec(), |gv, xv| {
                if xv > *lo && xv < *hi {
                    gv
                } else {
                    0.0
                }
            });
            out.push((*x, gx));
        }
        Op::Sum(x) => {
            out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item())));
        }
        Op::Mean(x) => {
            let t = val(*x);
            out.push((*x, Tensor::full(t.shape().to_vec(), g.item() / t.numel() as f64)));
        }
        Op::Stack(xs) => {
            for (i, v) in xs.iter().enumerate() {
                if needs(nodes, *v) {
                    out.push((*v, g.index(i).reshape(val(*v).shape().to_vec())?));
                }
            }
        }
        Op::Reshape(x) => {
            out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?));
        }
        Op::Custom { func, inputs } => {
            let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
            let flags: Vec<bool> = inputs.iter().map(|v| needs(nodes, *v)).collect();
            let grads = func.backward(&values, &node.value, g, &flags)?;
            for ((v, gv), flag) in inputs.iter().zip(grads).zip(flags) {
                if let (Some(gv), true) = (gv, flag) {
                    if gv.shape() != val(*v).shape() {
                        return shape_err(func.name(), "gradient shape differs from input");
                    }
                    out.push((*v, gv));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap()).unwrap();
        let c = g.cosine_similarity(v, v).unwrap();
        assert!(approx(g.value(c).item(), 1.0, 1e-12));
    }

    #[test]
    fn uniform_cross_entropy_is_log_n() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 7], 0.25)).unwrap();
        let ce = g.cross_entropy(x, 1, &[3]).unwrap();
        assert!(approx(g.value(ce).item(), 7f64.ln(), 1e-12));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cosine_gradient_vanishes_at_alignment() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, -0.5]).unwrap()).unwrap();
        let u = g.constant(Tensor::new(vec![1, 3], vec![2.0, 4.0, -1.0]).unwrap()).unwrap();
        let c = g.cosine_similarity(w, u).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.relu(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).err(), Some(Error::GraphConsumed));
        assert_eq!(g.relu(w).err(), Some(Error::GraphConsumed));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let m = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(matches!(g.matmul(a, m), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut g = Graph::new();
        assert_eq!(
            g.constant(Tensor::vector(vec![1.0, f64::NAN])).err(),
            Some(Error::NonFinite("leaf"))
        );
        let big = g.constant(Tensor::vector(vec![800.0])).unwrap();
        assert_eq!(g.exp(big).err(), Some(Error::NonFinite("exp")));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x + x) -> grad 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0, -1.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0])).unwrap();
        let c = g.constant(Tensor::vector(vec![2.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }
}
