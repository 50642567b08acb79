//! Tape-based reverse-mode differentiation.
//!
//! Values are recorded in creation order, so every node's inputs precede it
//! and `backward` simply walks the tape in reverse.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ssm::{self, ScanInputs, ScanPath};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Scalar, Tensor};

pub const LAYER_NORM_EPS: Scalar = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Exp,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    AddScalar(Var),
    Unary(Unary, Var),
    Softmax(Var),
    MeanLeading(Var),
    Mean(Var),
    LayerNorm { x: Var, rstd: Vec<Scalar> },
    DwConv3x3 { x: Var, w: Var, b: Var },
    Gather { x: Var, idx: Rc<[usize]> },
    Reshape(Var),
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, h: Vec<Scalar>, tr: ssm::Transitions, path: ScanPath },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::Softmax(a)
            | Op::MeanLeading(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![a],
            Op::LayerNorm { x, .. } | Op::Gather { x, .. } => vec![x],
            Op::DwConv3x3 { x, w, b } => vec![x, w, b],
            Op::Scan { x, delta, a, b, c, d, .. } => vec![x, delta, a, b, c, d],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records operations and replays their backward rules.
///
/// A tape belongs to one training step; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats every `period` elements of the left.
    Trailing(usize),
}

fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    let core = &rhs[first..];
    if core.len() <= lhs.len() && lhs.ends_with(core) {
        let period: usize = core.iter().product();
        return Ok(Broadcast::Trailing(period));
    }
    Err(Error::shape(op, lhs, rhs))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.clone();
        match broadcast(op, av.shape(), bv.shape())? {
            Broadcast::Same => {
                for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o = f(*o, y);
                }
            }
            Broadcast::Trailing(p) => {
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, bv.data()[i % p]);
                }
            }
        }
        Ok(out)
    }

    /// `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a * b`; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, k: Scalar) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: Scalar) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let out = self.value(a).map(|v| match f {
            Unary::Silu => v * ssm::sigmoid(v),
            Unary::Exp => v.exp(),
            Unary::Softplus => ssm::softplus(v),
        });
        self.push(out, Op::Unary(f, a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// Mean over every axis but the last; leading extents become 1.
    pub fn mean_leading(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let rows = v.len() / c;
        let mut acc = vec![0.0; c];
        for row in v.data().chunks(c) {
            for (s, &e) in acc.iter_mut().zip(row) {
                *s += e;
            }
        }
        let inv = 1.0 / rows as Scalar;
        acc.iter_mut().for_each(|s| *s *= inv);
        let mut shape = vec![1; v.ndim()];
        *shape.last_mut().unwrap() = c;
        let out = Tensor::new(&shape, acc).expect("valid shape");
        self.push(out, Op::MeanLeading(a))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as Scalar);
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as Scalar;
        let m = self.mean(a);
        self.scale(m, n)
    }

    /// Normalises the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.last_dim();
        let mut out = v.clone();
        let mut rstd = Vec::with_capacity(v.len() / c);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<Scalar>() / c as Scalar;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<Scalar>() / c as Scalar;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm { x: a, rstd })
    }

    /// Depthwise 3×3 convolution, zero padding, stride 1.
    ///
    /// `x`: `[H×W×C]`, `w`: `[3×3×C]`, `b`: `[C]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [h, wd, c] = *xv.shape() else {
            return Err(Error::shape("dwconv3x3", xv.shape(), wv.shape()));
        };
        if wv.shape() != [3, 3, c] || bv.shape() != [c] {
            return Err(Error::shape("dwconv3x3", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; h * wd * c];
        let (xd, kd) = (xv.data(), wv.data());
        for i in 0..h {
            for j in 0..wd {
                let o = &mut out[(i * wd + j) * c..(i * wd + j + 1) * c];
                o.copy_from_slice(bv.data());
                for di in 0..3 {
                    let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else { continue };
                    for dj in 0..3 {
                        let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < wd) else { continue };
                        let src = &xd[(si * wd + sj) * c..(si * wd + sj + 1) * c];
                        let k = &kd[(di * 3 + dj) * c..(di * 3 + dj + 1) * c];
                        for ch in 0..c {
                            o[ch] += src[ch] * k[ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[h, wd, c], out)?;
        Ok(self.push(out, Op::DwConv3x3 { x, w, b }))
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`.
    ///
    /// Covers permutations, patch extraction and edge padding; the backward
    /// rule scatter-adds, so repeated indices are fine.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Precondition(format!("gather index {bad} out of range for {:?}", xv.shape())));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Selective scan over one sequence; see [`crate::ssm`].
    ///
    /// `x`, `delta`: `[L×D]`; `a`: `[D×N]`; `b`, `c`: `[L×N]`; `d`: `[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        path: ScanPath,
    ) -> Result<Var> {
        let [l, ch] = *self.shape(x) else {
            return Err(Error::shape("selective_scan", self.shape(x), self.shape(a)));
        };
        let n = self.shape(a).last().copied().unwrap_or(0);
        let inp = self.scan_inputs(x, delta, a, b, c, d, l, ch, n);
        let (out, tr) = ssm::scan_keep_transitions(&inp, path)?;
        let y = Tensor::new(&[l, ch], out.y)?;
        Ok(self.push(y, Op::Scan { x, delta, a, b, c, d, h: out.h, tr, path }))
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_inputs(
        &self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        l: usize,
        ch: usize,
        n: usize,
    ) -> ScanInputs<'_> {
        ScanInputs {
            len: l,
            channels: ch,
            states: n,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d_skip: self.value(d).data(),
        }
    }

    fn accumulate(&mut self, v: Var, g: &[Scalar]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(grad) => {
                for (a, b) in grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(Tensor::new(node.value.shape(), g.to_vec()).expect("gradient matches value")),
        }
    }

    /// Accumulates gradient for the right operand of a broadcast op.
    fn accumulate_broadcast(&mut self, v: Var, g: &[Scalar]) {
        let n = self.value(v).len();
        if n == g.len() {
            self.accumulate(v, g);
            return;
        }
        let mut red = vec![0.0; n];
        for (i, &e) in g.iter().enumerate() {
            red[i % n] += e;
        }
        self.accumulate(v, &red);
    }

    /// Back-propagates from a one-element `loss`.
    ///
    /// Every node that requires grad ends with a populated gradient (zeros if
    /// the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Precondition(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), 1.0));
            // Gradients are allocated on first contribution; nodes nothing
            // flows into are skipped.
            for i in (0..=loss.0).rev() {
                let Some(g) = self.nodes[i].grad.take() else { continue };
                let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
                self.backward_op(Var(i), &op, &g)?;
                self.nodes[i].op = op;
                self.nodes[i].grad = Some(g);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op, g: &Tensor) -> Result<()> {
        let gd = g.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let p = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(gd, self.value(b).data(), &mut da, m, p, k);
                    self.accumulate(a, &da);
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * p];
                    matmul_tn_into(self.value(a).data(), gd, &mut db, m, k, p);
                    self.accumulate(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, gd);
                self.accumulate_broadcast(b, gd);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let nb = bv.len();
                let da: Option<Vec<Scalar>> =
                    self.requires_grad(a).then(|| gd.iter().enumerate().map(|(i, &e)| e * bv[i % nb]).collect());
                let db: Option<Vec<Scalar>> = self.requires_grad(b).then(|| {
                    let mut red = vec![0.0; nb];
                    for (i, (&e, &x)) in gd.iter().zip(av).enumerate() {
                        red[i % nb] += e * x;
                    }
                    red
                });
                if let Some(da) = da {
                    self.accumulate(a, &da);
                }
                if let Some(db) = db {
                    self.accumulate(b, &db);
                }
            }
            Op::Scale(a, k) => {
                let da: Vec<Scalar> = gd.iter().map(|e| e * k).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(a, gd),
            Op::Unary(f, a) => {
                let x = self.value(a).data();
                let y = self.value(out).data();
                let da: Vec<Scalar> = (0..x.len())
                    .map(|i| {
                        let d = match f {
                            Unary::Silu => {
                                let s = ssm::sigmoid(x[i]);
                                s * (1.0 + x[i] * (1.0 - s))
                            }
                            Unary::Exp => y[i],
                            Unary::Softplus => ssm::sigmoid(x[i]),
                        };
                        gd[i] * d
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Softmax(a) => {
                let y = self.value(out);
                let c = y.last_dim();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: Scalar = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::MeanLeading(a) => {
                let n = self.value(a).len();
                let c = gd.len();
                let inv = 1.0 / (n / c) as Scalar;
                let da: Vec<Scalar> = (0..n).map(|i| gd[i % c] * inv).collect();
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let da = vec![gd[0] / n as Scalar; n];
                self.accumulate(a, &da);
            }
            Op::LayerNorm { x, ref rstd } => {
                let y = self.value(out);
                let c = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, ((dr, yr), gr)) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)).enumerate() {
                    let mg = gr.iter().sum::<Scalar>() / c as Scalar;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<Scalar>() / c as Scalar;
                    for k in 0..c {
                        dr[k] = rstd[r] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::DwConv3x3 { x, w, b } => {
                let [h, wd, c] = *self.shape(x) else { unreachable!() };
                let xd = self.value(x).data().to_vec();
                let kd = self.value(w).data().to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; 9 * c];
                let mut db = vec![0.0; c];
                for i in 0..h {
                    for j in 0..wd {
                        let go = &gd[(i * wd + j) * c..(i * wd + j + 1) * c];
                        for ch in 0..c {
                            db[ch] += go[ch];
                        }
                        for di in 0..3 {
                            let Some(si) = (i + di).checked_sub(1).filter(|&s| s < h) else { continue };
                            for dj in 0..3 {
                                let Some(sj) = (j + dj).checked_sub(1).filter(|&s| s < wd) else { continue };
                                let so = (si * wd + sj) * c;
                                let ko = (di * 3 + dj) * c;
                                for ch in 0..c {
                                    dx[so + ch] += go[ch] * kd[ko + ch];
                                    dw[ko + ch] += go[ch] * xd[so + ch];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::Gather { x, ref idx } => {
                let mut dx = vec![0.0; self.value(x).len()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += gd[o];
                }
                self.accumulate(x, &dx);
            }
            Op::Scan { x, delta, a, b, c, d, ref h, ref tr, path } => {
                let [l, ch] = *self.shape(x) else { unreachable!() };
                let n = self.shape(a)[1];
                let inp = self.scan_inputs(x, delta, a, b, c, d, l, ch, n);
                let grads = ssm::scan_backward_with(&inp, h, tr, gd, path)?;
                self.accumulate(x, &grads.x);
                self.accumulate(delta, &grads.delta);
                self.accumulate(a, &grads.a);
                self.accumulate(b, &grads.b);
                self.accumulate(c, &grads.c);
                self.accumulate(d, &grads.d_skip);
            }
        }
        Ok(())
    }
}

/// `f[H×W×C_in] · w[C_in×C_out] + b[C_out]` applied at every position.
pub fn conv1x1(tape: &mut Tape, f: Var, w: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let cin = *shape.last().unwrap();
    let wshape = tape.shape(w).to_vec();
    if wshape.len() != 2 || wshape[0] != cin {
        return Err(Error::shape("conv1x1", &shape, &wshape));
    }
    let rows = tape.value(f).len() / cin;
    let flat = tape.reshape(f, &[rows, cin])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = wshape[1];
    tape.reshape(y, &out_shape)
}

/// Mean over all spatial positions of an `[H×W×C]` map, giving `[1×1×C]`.
pub fn global_avg_pool(tape: &mut Tape, f: Var) -> Var {
    tape.mean_leading(f)
}
