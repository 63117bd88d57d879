//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to replay the vector-Jacobian product. Nodes are appended in execution
//! order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, dim_err, Result};
use crate::math;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize },
    Affine { x: Var, w: Var, b: Option<Var> },
    Bilinear { f: Var, pts: Var },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows { x: Var, s: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Reshape(Var),
    ResizeNearest(Var),
    Sum(Var),
    WeightedSum { xs: Vec<Var>, weights: Vec<f64> },
    Focal { x: Var, targets: Vec<f64>, gamma: f64, alpha: f64 },
    BceLogits { x: Var, targets: Vec<f64> },
    CrossEntropy { x: Var, targets: Vec<usize> },
    L1 { x: Var, targets: Vec<f64>, mask: Vec<f64> },
    IouLoss { x: Var, targets: Vec<[f64; 4]>, scales: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops. One tape per forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: `∂loss/∂v` for every recorded value that needed one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_len(n: usize, expected: usize, what: &str) -> Result<()> {
    if n != expected {
        return Err(dim_err!("{what}: expected {expected} entries, got {n}"));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable input: gradients flow into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.ng(x) || self.ng(k) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, k, b, stride, pad }, ng))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::affine(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    /// Bilinear lookups into `f [D,H,W]` at map coordinates `pts [N, 2]` (x, y).
    /// Differentiable in both the map and the coordinates.
    pub fn bilinear_sample(&mut self, f: Var, pts: Var) -> Result<Var> {
        let points = self.points(pts)?;
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(crate::Error::NonFinite(alloc::string::String::from("bilinear sample point")));
        }
        let out = tensor::bilinear_sample(self.value(f), &points)?;
        let ng = self.ng(f) || self.ng(pts);
        Ok(self.push(out, Op::Bilinear { f, pts }, ng))
    }

    fn points(&self, pts: Var) -> Result<Vec<(f64, f64)>> {
        let t = self.value(pts);
        if t.rank() != 2 || t.shape()[1] != 2 {
            return Err(dim_err!("sample points must be [N, 2], got {:?}", t.shape()));
        }
        Ok(t.data().chunks(2).map(|p| (p[0], p[1])).collect())
    }

    /// Discrete branch decisions taken by piecewise ops (relu signs, L1 signs,
    /// IoU min choices, bilinear cells). Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).data().iter().map(|&v| (v > 0.0) as i64)),
                Op::L1 { x, targets, .. } => sig.extend(
                    self.value(*x).data().iter().zip(targets).map(|(&a, &b)| (a > b) as i64 - (a < b) as i64),
                ),
                Op::IouLoss { x, targets, scales } => {
                    let t = self.value(*x);
                    let n = t.shape()[1];
                    for j in 0..n {
                        let p = decode_ltrb(t.data(), n, j, scales[j]);
                        sig.extend((0..4).map(|c| (p[c] < targets[j][c]) as i64));
                    }
                }
                Op::Bilinear { f, pts } => {
                    let (h, w) = (self.shape(*f)[1], self.shape(*f)[2]);
                    for (x, y) in self.points(*pts).unwrap_or_default() {
                        let tap = tensor::bilinear_tap(x, y, h, w);
                        sig.push(tap.idx[0] as i64);
                        sig.push((x < 0.0) as i64 + 2 * (x > (w - 1) as f64) as i64);
                        sig.push((y < 0.0) as i64 + 2 * (y > (h - 1) as f64) as i64);
                    }
                }
                _ => {}
            }
        }
        sig
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = tensor::map(self.value(x), math::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = tensor::map(self.value(x), |v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Multiplies row `n` of `x [N, D]` by `s[n]` (`s` holds N values).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.len() != tx.shape()[0] {
            return Err(dim_err!("scale_rows: x {:?}, s {:?}", tx.shape(), ts.shape()));
        }
        let d = tx.shape()[1];
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * ts.data()[i / d]).collect();
        let out = Tensor::new(tx.shape(), data)?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::ScaleRows { x, s }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(contract_err!("concat of zero tensors"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(dim_err!("concat: {:?} incompatible with {:?} on axis {axis}", s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = tensor::axis_split(t.shape(), axis)?;
        if start + len > n {
            return Err(dim_err!("slice {start}..{} out of range {n} on axis {axis}", start + len));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    /// Gathers entries of `x` along `axis` (indices may repeat).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (outer, n, inner) = tensor::axis_split(t.shape(), axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err!("select index {bad} out of range {n}"));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Select { x, axis, indices: indices.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn resize_nearest(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let out = tensor::resize_nearest(self.value(x), ho, wo)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ResizeNearest(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ weights[i] · xs[i]` over scalar inputs.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Result<Var> {
        check_len(weights.len(), xs.len(), "weighted_sum weights")?;
        let mut s = 0.0;
        for (&v, &w) in xs.iter().zip(weights) {
            check_len(self.value(v).len(), 1, "weighted_sum input")?;
            s += w * self.value(v).item();
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { xs: xs.to_vec(), weights: weights.to_vec() }, ng))
    }

    /// Summed focal loss of logits `x` against binary `targets`.
    pub fn focal_loss(&mut self, x: Var, targets: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        let t = self.value(x);
        check_len(targets.len(), t.len(), "focal targets")?;
        let s = t.data().iter().zip(targets).map(|(&z, &y)| focal_term(z, y, gamma, alpha).0).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Focal { x, targets: targets.to_vec(), gamma, alpha }, ng))
    }

    /// Summed binary cross-entropy of logits `x` against `targets ∈ [0,1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(x);
        check_len(targets.len(), t.len(), "bce targets")?;
        let s = t.data().iter().zip(targets).map(|(&z, &y)| math::softplus(z) - y * z).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::BceLogits { x, targets: targets.to_vec() }, ng))
    }

    /// Summed cross-entropy over columns of logits `x [C, P]` (class axis 0).
    pub fn cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (c, p) = (t.shape()[0], t.len() / t.shape()[0].max(1));
        check_len(targets.len(), p, "cross_entropy targets")?;
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(dim_err!("cross_entropy target {bad} >= {c} classes"));
        }
        let ls = tensor::log_softmax(&t.clone().reshape(&[c, p])?, 0)?;
        let s = -targets.iter().enumerate().map(|(j, &k)| ls.data()[k * p + j]).sum::<f64>();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::CrossEntropy { x, targets: targets.to_vec() }, ng))
    }

    /// `Σ mask · |x − targets|`.
    pub fn l1_loss(&mut self, x: Var, targets: &[f64], mask: &[f64]) -> Result<Var> {
        let t = self.value(x);
        check_len(targets.len(), t.len(), "l1 targets")?;
        check_len(mask.len(), t.len(), "l1 mask")?;
        let s = t.data().iter().zip(targets).zip(mask).map(|((&a, &b), &m)| m * (a - b).abs()).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::L1 { x, targets: targets.to_vec(), mask: mask.to_vec() }, ng))
    }

    /// Summed `−ln IoU` between boxes decoded as `exp(x)·scale` and target
    /// `(l, t, r, b)` distances. `x` is `[4, N]`.
    pub fn iou_loss(&mut self, x: Var, targets: &[[f64; 4]], scales: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != 4 {
            return Err(dim_err!("iou_loss expects [4, N], got {:?}", t.shape()));
        }
        let n = t.shape()[1];
        check_len(targets.len(), n, "iou targets")?;
        check_len(scales.len(), n, "iou scales")?;
        let mut s = 0.0;
        for j in 0..n {
            let pred = decode_ltrb(t.data(), n, j, scales[j]);
            s += iou_term(&pred, &targets[j]).0;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::IouLoss { x, targets: targets.to_vec(), scales: scales.to_vec() }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, stride, pad } => {
                let (dx, dk, db) = tensor::conv2d_backward(self.value(*x), self.value(*k), gd, *stride, *pad)?;
                acc(*x, dx);
                acc(*k, dk);
                if let Some(b) = b {
                    acc(*b, db.reshape(self.shape(*b))?);
                }
            }
            Op::Affine { x, w, b } => {
                let (dx, dw, db) = tensor::affine_backward(self.value(*x), self.value(*w), gd)?;
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db.reshape(self.shape(*b))?);
                }
            }
            Op::Bilinear { f, pts } => {
                let points = self.points(*pts)?;
                acc(*f, tensor::bilinear_sample_backward(self.shape(*f), &points, gd));
                if self.ng(*pts) {
                    let dp = tensor::bilinear_point_grads(self.value(*f), &points, gd);
                    acc(*pts, Tensor::new(self.shape(*pts), dp)?);
                }
            }
            Op::Sigmoid(x) => {
                let d = out.data().iter().zip(gd).map(|(&s, &go)| go * s * (1.0 - s)).collect();
                acc(*x, Tensor::new(out.shape(), d)?);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = xd.iter().zip(gd).map(|(&v, &go)| if v > 0.0 { go } else { 0.0 }).collect();
                acc(*x, Tensor::new(out.shape(), d)?);
            }
            Op::Exp(x) => {
                let d = out.data().iter().zip(gd).map(|(&e, &go)| go * e).collect();
                acc(*x, Tensor::new(out.shape(), d)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = tensor::axis_split(out.shape(), *axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dotp: f64 = (0..n).map(|k| y[at(k)] * gd[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dotp);
                        }
                    }
                }
                acc(*x, Tensor::new(out.shape(), d)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, tensor::map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = tb.data().iter().zip(gd).map(|(&y, &go)| y * go).collect();
                let db = ta.data().iter().zip(gd).map(|(&y, &go)| y * go).collect();
                acc(*a, Tensor::new(out.shape(), da)?);
                acc(*b, Tensor::new(out.shape(), db)?);
            }
            Op::Scale(x, c) => acc(*x, tensor::map(g, |v| v * c)),
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let d = tx.shape()[1];
                let dx = gd.iter().enumerate().map(|(i, &go)| go * ts.data()[i / d]).collect();
                let mut dsv = vec![0.0; ts.len()];
                for (i, (&go, &xv)) in gd.iter().zip(tx.data()).enumerate() {
                    dsv[i / d] += go * xv;
                }
                acc(*x, Tensor::new(tx.shape(), dx)?);
                acc(*s, Tensor::new(ts.shape(), dsv)?);
            }
            Op::Concat { xs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let vs = self.shape(v);
                    let chunk = vs[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                    }
                    acc(v, Tensor::new(vs, d)?);
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.shape(*x);
                let (outer, n, inner) = tensor::axis_split(src, *axis)?;
                let len = out.shape()[*axis];
                let mut d = Tensor::zeros(src);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d.data_mut()[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::Select { x, axis, indices } => {
                let src = self.shape(*x);
                let (outer, n, inner) = tensor::axis_split(src, *axis)?;
                let m = indices.len();
                let mut d = Tensor::zeros(src);
                let dd = d.data_mut();
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let dst = (o * n + i) * inner;
                        let srcb = (o * m + j) * inner;
                        for t in 0..inner {
                            dd[dst + t] += gd[srcb + t];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::ResizeNearest(x) => {
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                acc(*x, tensor::resize_nearest_backward(self.shape(*x), ho, wo, gd));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gd[0])),
            Op::WeightedSum { xs, weights } => {
                for (&v, &w) in xs.iter().zip(weights) {
                    acc(v, Tensor::scalar(w * gd[0]).reshape(self.shape(v))?);
                }
            }
            Op::Focal { x, targets, gamma, alpha } => {
                let t = self.value(*x);
                let d = t.data().iter().zip(targets).map(|(&z, &y)| gd[0] * focal_term(z, y, *gamma, *alpha).1).collect();
                acc(*x, Tensor::new(t.shape(), d)?);
            }
            Op::BceLogits { x, targets } => {
                let t = self.value(*x);
                let d = t.data().iter().zip(targets).map(|(&z, &y)| gd[0] * (math::sigmoid(z) - y)).collect();
                acc(*x, Tensor::new(t.shape(), d)?);
            }
            Op::CrossEntropy { x, targets } => {
                let t = self.value(*x);
                let (c, p) = (t.shape()[0], targets.len());
                let mut sm = tensor::softmax(&t.clone().reshape(&[c, p])?, 0)?.into_data();
                for (j, &k) in targets.iter().enumerate() {
                    sm[k * p + j] -= 1.0;
                }
                sm.iter_mut().for_each(|v| *v *= gd[0]);
                acc(*x, Tensor::new(t.shape(), sm)?);
            }
            Op::L1 { x, targets, mask } => {
                let t = self.value(*x);
                let d = t
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&a, &b), &m)| {
                        let s = if a > b { 1.0 } else if a < b { -1.0 } else { 0.0 };
                        gd[0] * m * s
                    })
                    .collect();
                acc(*x, Tensor::new(t.shape(), d)?);
            }
            Op::IouLoss { x, targets, scales } => {
                let t = self.value(*x);
                let n = t.shape()[1];
                let mut d = vec![0.0; t.len()];
                for j in 0..n {
                    let pred = decode_ltrb(t.data(), n, j, scales[j]);
                    let dpred = iou_term(&pred, &targets[j]).1;
                    for c in 0..4 {
                        // d/draw of exp(raw)·scale is the decoded value itself.
                        d[c * n + j] = gd[0] * dpred[c] * pred[c];
                    }
                }
                acc(*x, Tensor::new(t.shape(), d)?);
            }
        }
        Ok(())
    }
}

fn decode_ltrb(raw: &[f64], n: usize, j: usize, scale: f64) -> [f64; 4] {
    core::array::from_fn(|c| math::exp(raw[c * n + j]) * scale)
}

/// Focal loss for one logit and its derivative with respect to the logit.
pub(crate) fn focal_term(z: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = math::sigmoid(z);
    let log_p = -math::softplus(-z);
    let log_q = -math::softplus(z);
    let pos = if gamma == 0.0 { 1.0 } else { math::pow(1.0 - p, gamma) };
    let neg = if gamma == 0.0 { 1.0 } else { math::pow(p, gamma) };
    let loss_pos = -alpha * pos * log_p;
    let loss_neg = -(1.0 - alpha) * neg * log_q;
    let d_pos = alpha * pos * (gamma * p * log_p - (1.0 - p));
    let d_neg = -(1.0 - alpha) * neg * (gamma * (1.0 - p) * log_q - p);
    (y * loss_pos + (1.0 - y) * loss_neg, y * d_pos + (1.0 - y) * d_neg)
}

/// `−ln((I+1)/(U+1))` for `(l,t,r,b)` boxes and its gradient in the predicted distances.
pub(crate) fn iou_term(p: &[f64; 4], t: &[f64; 4]) -> (f64, [f64; 4]) {
    let [l, tp, r, b] = *p;
    let [lt, tt, rt, bt] = *t;
    let wi = l.min(lt) + r.min(rt);
    let hi = tp.min(tt) + b.min(bt);
    let inter = wi * hi;
    let area_p = (l + r) * (tp + b);
    let area_t = (lt + rt) * (tt + bt);
    let union = area_p + area_t - inter;
    let loss = -math::ln((inter + 1.0) / (union + 1.0));
    let di = [
        if l < lt { hi } else { 0.0 },
        if tp < tt { wi } else { 0.0 },
        if r < rt { hi } else { 0.0 },
        if b < bt { wi } else { 0.0 },
    ];
    let da = [tp + b, l + r, tp + b, l + r];
    let grad = core::array::from_fn(|c| -di[c] / (inter + 1.0) + (da[c] - di[c]) / (union + 1.0));
    (loss, grad)
}
