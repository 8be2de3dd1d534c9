//! Operation tape and reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are pushed in evaluation order, so node
//! indices are already a topological order and `backward` is a single reverse
//! sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{conv2d_backward, conv2d_forward};
use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// How a per-sample loss is folded into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize, broadcast: bool },
    Scale(usize, T),
    Relu(usize),
    Exp(usize),
    ClampMax(usize, T),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    SoftmaxXent {
        logits: usize,
        probs: Tensor<T>,
        targets: Tensor<T>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records forward operations for one computation. Tapes are single-owner;
/// use one per worker.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf variable.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.idx).and_then(Option::take)
    }
}

/// `Some(false)` for equal shapes, `Some(true)` when `b` matches the trailing
/// dimensions of `a` and is broadcast over the leading ones.
fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        Some(false)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(true)
    } else {
        None
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn add_assign<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = *d + s;
    }
}

/// Sums `t` over its leading dimensions down to `shape`.
fn reduce_to<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let inner: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    for chunk in t.data().chunks(inner) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

/// Numerically stable per-row softmax cross-entropy and the softmax itself.
pub(crate) fn softmax_xent_rows<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> (Vec<T>, Tensor<T>) {
    let k = logits.sample_len();
    let mut probs = Tensor::zeros(logits.shape());
    let mut losses = Vec::with_capacity(logits.batch());
    for ((row, t), p) in logits
        .data()
        .chunks(k)
        .zip(targets.data().chunks(k))
        .zip(probs.data_mut().chunks_mut(k))
    {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (pj, &z) in p.iter_mut().zip(row) {
            *pj = (z - m).exp();
            denom = denom + *pj;
        }
        let log_denom = denom.ln();
        let mut picked = T::zero();
        for ((pj, &z), &tj) in p.iter_mut().zip(row).zip(t) {
            *pj = *pj / denom;
            picked = picked + tj * (z - m);
        }
        losses.push(log_denom - picked);
    }
    (losses, probs)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates ops without recording backward state.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Detached("variable belongs to another tape"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("variable from this tape")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.rg(i)).unwrap_or(false)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        ensure_finite(&out, "matmul")?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize, bool)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast =
            broadcast_kind(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let inner = tb.len().max(1);
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &bv) in chunk.iter_mut().zip(tb.data()) {
                *o = f(*o, bv);
            }
        }
        ensure_finite(&out, op)?;
        Ok((out, ia, ib, broadcast))
    }

    /// Elementwise sum. `b` may match the trailing dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib, broadcast) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add { a: ia, b: ib, broadcast }, rg))
    }

    /// Elementwise product. `b` may match the trailing dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ia, ib, broadcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul { a: ia, b: ib, broadcast }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        ensure_finite(&out, "scale")?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale(ia, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Relu(ia), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(T::exp);
        ensure_finite(&out, "exp")?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Exp(ia), rg))
    }

    /// `min(a, max)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, a: Var, max: T) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v.min(max));
        let rg = self.rg(ia);
        Ok(self.push(out, Op::ClampMax(ia, max), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// `(batch, ...) -> (batch, features)`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let shape = [t.batch(), t.sample_len()];
        self.reshape(a, &shape)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        ensure_finite(&out, "sum")?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let out = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        ensure_finite(&out, "mean")?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Mean(ia), rg))
    }

    /// Strided, zero-padded 2-D convolution; `x` is NCHW, `w` is OIHW.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let out = conv2d_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| &self.nodes[i].value),
            stride,
            pad,
        )?;
        ensure_finite(&out, "conv2d")?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Non-overlapping `size x size` max pooling (trailing rows/cols dropped).
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if t.rank() != 4 || size == 0 || t.shape()[2] < size || t.shape()[3] < size {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                msg: format!("cannot pool {:?} with window {size}", t.shape()),
            });
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let src = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let j = base + (oy * size + dy) * w + ox * size + dx;
                            if src[j] > src[best] {
                                best = j;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::MaxPool { x: ix, argmax }, rg))
    }

    /// `(n, c, h, w) -> (n, c)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if t.rank() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                msg: format!("expected NCHW, got {:?}", t.shape()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let hw = t.shape()[2] * t.shape()[3];
        let inv = T::from_f64(1.0 / hw as f64);
        let data = t.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new([n, c], data)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::GlobalAvgPool(ix), rg))
    }

    /// Cross-entropy between `softmax(logits)` and one-hot `targets`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        reduction: Reduction,
    ) -> Result<Var> {
        let il = self.check(logits)?;
        let lt = &self.nodes[il].value;
        if lt.rank() != 2 || lt.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lt.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let k = lt.shape()[1];
        for (row, t) in targets.data().chunks(k).enumerate() {
            let ones = t.iter().filter(|&&v| v == T::one()).count();
            let zeros = t.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(TensorError::NotOneHot { row });
            }
        }
        let (losses, probs) = softmax_xent_rows(lt, targets);
        let total: T = losses.iter().copied().sum();
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / T::from_f64(losses.len() as f64),
        };
        let out = Tensor::scalar(value);
        ensure_finite(&out, "softmax_cross_entropy")?;
        let rg = self.rg(il);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits: il,
                probs,
                targets: targets.clone(),
                reduction,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let il = self.check(loss)?;
        let root = &self.nodes[il];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached("loss does not depend on any differentiable leaf"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(il + 1, || None);
        grads[il] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.rg(idx) {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => add_assign(existing, &g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = Tensor::zeros([m, k]);
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, tb.data(), 1, n as isize, T::zero(), da.data_mut(), k as isize, 1);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros([k, n]);
                    T::gemm(k, m, n, T::one(), ta.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), db.data_mut(), n as isize, 1);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let db = if *broadcast { reduce_to(g, val(*b).shape()) } else { g.clone() };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (ta, tb) = (val(*a), val(*b));
                let inner = tb.len().max(1);
                if self.rg(*a) {
                    let mut da = g.clone();
                    for chunk in da.data_mut().chunks_mut(inner) {
                        for (d, &bv) in chunk.iter_mut().zip(tb.data()) {
                            *d = *d * bv;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let prod = g.zip_map(ta, |x, y| x * y)?;
                    let db = if *broadcast { reduce_to(&prod, tb.shape()) } else { prod };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * *c)),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |gv, y| gv * y)?),
            Op::ClampMax(a, max) => {
                let d = g.zip_map(val(*a), |gv, x| if x <= *max { gv } else { T::zero() })?;
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(val(*a).shape().to_vec())?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                let v = g.item() / T::from_f64(t.len() as f64);
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let want = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv2d_backward(val(*x), val(*w), b.is_some(), g, *stride, *pad, want)?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.weight {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.bias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] = dx.data()[src] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let t = val(*x);
                let hw = t.shape()[2] * t.shape()[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Tensor::zeros(t.shape());
                for (chunk, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv * inv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                reduction,
            } => {
                let mut scale = g.item();
                if *reduction == Reduction::Mean {
                    scale = scale / T::from_f64(probs.batch() as f64);
                }
                let d = probs.zip_map(targets, |p, t| (p - t) * scale)?;
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}
