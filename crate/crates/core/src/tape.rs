//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The tape is define-by-run: every forward op appends a node holding its
//! output value and the ids of its inputs, so the graph is rebuilt on each
//! training step and recurrent unrolls of any length fall out for free.
//! [`Tape::backward`] walks the nodes in reverse, accumulating gradients
//! into every leaf that was registered with tracking enabled.
//!
//! Gradient propagation stops at untracked leaves. Frozen teacher
//! parameters and detached history frames are registered that way, which is
//! what makes "no gradient reaches the teacher" a structural property
//! rather than a numerical one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the active tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Abs { a: Var },
    ClampMin { a: Var, floor: f64 },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var },
    Conv1d { input: Var, kernel: Var, pad_left: usize },
    Embed { table: Var, indices: Vec<usize> },
    Reshape { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// How two operand shapes line up for elementwise ops.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is a single element applied to every lhs element.
    ScalarRhs,
    ScalarLhs,
    /// rhs is a vector broadcast across the rows of a 2-D lhs.
    RowRhs,
    RowLhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(b) == 1 {
        return Ok(Broadcast::ScalarRhs);
    }
    if numel(a) == 1 {
        return Ok(Broadcast::ScalarLhs);
    }
    if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
        return Ok(Broadcast::RowRhs);
    }
    if b.len() == 2 && a.len() == 1 && a[0] == b[1]
    {
        return Ok(Broadcast::RowLhs);
    }
    Err(Error::ShapeMismatch { op, details: format!("{a:?} vs {b:?}") })
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor. Tracked leaves receive gradients from
    /// [`Tape::backward`]; untracked leaves block propagation.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    /// Untracked leaf, for constants and detached values.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Tape::backward`], if one reached it.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Detaches a value: re-registers it as an untracked leaf so that
    /// gradients do not flow into the subgraph that produced it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Test instrumentation: corrupts the backward rule of the named op so
    /// that gradient checks must fail. Used as a negative control.
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let needs_grad = tracked
            || match &op {
                Op::Leaf => false,
                _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
            };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Conv1d { input, kernel, .. } => vec![*input, *kernel],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale { a, .. }
            | Op::Slice { a, .. }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Abs { a }
            | Op::ClampMin { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Softmax { a }
            | Op::Reshape { a } => vec![*a],
            Op::Embed { table, .. } => vec![*table],
        }
    }

    fn finish(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        value.check_finite(op_name).map_err(|e| match e {
            Error::NonFinite { details, .. } => Error::NonFinite { op: op_name, details },
            other => other,
        })?;
        Ok(self.push(value, op, false))
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]@[k,n]`, `[k]@[k,n]` and `[m,k]@[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out_shape) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.finish("matmul", value, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let bc = broadcast_kind(name, self.value(a).shape(), self.value(b).shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::ScalarRhs => {
                let s = bv.data()[0];
                (av.shape().to_vec(), av.data().iter().map(|&x| f(x, s)).collect())
            }
            Broadcast::ScalarLhs => {
                let s = av.data()[0];
                (bv.shape().to_vec(), bv.data().iter().map(|&y| f(s, y)).collect())
            }
            Broadcast::RowRhs => {
                let c = av.shape()[1];
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % c]))
                    .collect();
                (av.shape().to_vec(), data)
            }
            Broadcast::RowLhs => {
                let c = bv.shape()[1];
                let data = bv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(av.data()[i % c], y))
                    .collect();
                (bv.shape().to_vec(), data)
            }
        };
        let value = Tensor::from_vec(shape, data)?;
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.finish(name, value, op)
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| c * x).collect(),
        )?;
        self.finish("scale", value, Op::Scale { a, c })
    }

    /// Concatenation along axis 0 (the only axis the models need).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if axis != 0 {
            return Err(Error::ShapeMismatch { op: "concat", details: "only axis 0 is supported".into() });
        }
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let trailing = &first[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if &t.shape()[1..] != trailing {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    details: format!("{:?} vs {:?}", t.shape(), first),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let value = Tensor::from_vec(shape, data)?;
        self.finish("concat", value, Op::Concat { parts: parts.to_vec() })
    }

    /// Contiguous `len` rows (or elements, for 1-D input) starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape()[0];
        if start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "slice",
                details: format!("[{start}, {}) out of {rows} rows", start + len),
            });
        }
        let stride: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&t.shape()[1..]);
        let value = Tensor::from_vec(shape, data)?;
        self.finish("slice", value, Op::Slice { a, start })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), |a| Op::Log { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), |a| Op::Abs { a })
    }

    /// `max(x, floor)` elementwise; gradient is zero where the clamp engages.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), |a| Op::ClampMin { a, floor })
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(Var) -> Op,
    ) -> Result<Var> {
        let value = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| f(x)).collect(),
        );
        // route the error through finish() so it names the op
        match value {
            Ok(v) => self.finish(name, v, op(a)),
            Err(Error::NonFinite { details, .. }) => Err(Error::NonFinite { op: name, details }),
            Err(e) => Err(e),
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.finish("sum", Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.finish("mean", Tensor::scalar(m), Op::Mean { a })
    }

    /// Softmax along the last axis, with per-row max subtraction so large
    /// logits cannot overflow.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        t.check_finite("softmax")?;
        let cols = *t.shape().last().unwrap();
        let mut data = vec![0.0; t.numel()];
        for r in 0..t.numel() / cols {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[r * cols + i] = e;
                z += e;
            }
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x /= z;
            }
        }
        let value = Tensor::from_vec(t.shape().to_vec(), data)?;
        self.finish("softmax", value, Op::Softmax { a })
    }

    /// 1-D convolution along the time axis with same-length zero padding.
    /// `input` is `[L]` or `[L, C]`, `kernel` is `[F, C, K]`; output `[L, F]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (l, c_in) = match self.value(input).shape() {
            [l] => (*l, 1),
            [l, c] => (*l, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    details: format!("input must be 1-D or 2-D, got {s:?}"),
                })
            }
        };
        let ks = self.value(kernel).shape().to_vec();
        let [f_out, c_k, k_w] = match ks.as_slice() {
            [f, c, k] => [*f, *c, *k],
            s => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    details: format!("kernel must be [filters, channels, width], got {s:?}"),
                })
            }
        };
        if c_k != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                details: format!("input has {c_in} channels, kernel expects {c_k}"),
            });
        }
        let pad_left = (k_w - 1) / 2;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; l * f_out];
        for t in 0..l {
            for f in 0..f_out {
                let mut acc = 0.0;
                for k in 0..k_w {
                    let src = t as isize + k as isize - pad_left as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        acc += x[src as usize * c_in + c] * w[(f * c_in + c) * k_w + k];
                    }
                }
                out[t * f_out + f] = acc;
            }
        }
        let value = Tensor::from_vec(vec![l, f_out], out)?;
        self.finish("conv1d", value, Op::Conv1d { input, kernel, pad_left })
    }

    /// Row lookup into an embedding table; gradients scatter-add back.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [vocab, dim] = match t.shape() {
            [v, d] => [*v, *d],
            s => {
                return Err(Error::ShapeMismatch {
                    op: "embedding_lookup",
                    details: format!("table must be 2-D, got {s:?}"),
                })
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::data(format!(
                "embedding index {bad} out of vocabulary of size {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_vec(vec![indices.len(), dim], data)?;
        self.finish("embedding_lookup", value, Op::Embed { table, indices: indices.to_vec() })
    }

    /// Shape change over the same data.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {shape:?}", t.shape()),
            });
        }
        let value = Tensor::from_vec(shape.to_vec(), t.data().to_vec())?;
        self.finish("reshape", value, Op::Reshape { a })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates gradients for every tracked leaf reachable from `loss`.
    /// Gradients accumulate when a node feeds multiple consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = std::mem::take(&mut self.grads[i]) else { continue };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        delta(slot);
    }

    fn propagate(&mut self, node: usize, op: &Op, g: &[f64]) {
        let fault = self.fault;
        let faulty = |name: &str| fault == Some(name);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n, _) =
                    matmul_dims(self.value(a).shape(), self.value(b).shape()).expect("recorded");
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
                self.accumulate(b, |db| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.binary_backward(a, b, g, |_x, _y| (1.0, 1.0));
            }
            Op::Sub { a, b } => {
                self.binary_backward(a, b, g, |_x, _y| (1.0, -1.0));
            }
            Op::Mul { a, b } => {
                self.binary_backward(a, b, g, |x, y| (y, x));
            }
            Op::Scale { a, c } => {
                self.accumulate(a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                });
            }
            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let seg = g[offset..offset + n].to_vec();
                    self.accumulate(p, |dp| {
                        for (d, &gi) in dp.iter_mut().zip(&seg) {
                            *d += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { a, start, .. } => {
                let stride: usize = self.value(a).shape()[1..].iter().product();
                let begin = start * stride;
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        da[begin + j] += gi;
                    }
                });
            }
            Op::Tanh { a } => {
                let y = self.nodes[node].value.data().to_vec();
                let bad = faulty("tanh");
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        let mut d = 1.0 - y[j] * y[j];
                        if bad {
                            d *= 1.5;
                        }
                        da[j] += gi * d;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[node].value.data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        da[j] += gi * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        if x[j] > 0.0 {
                            da[j] += gi;
                        }
                    }
                });
            }
            Op::Exp { a } => {
                let y = self.nodes[node].value.data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        da[j] += gi * y[j];
                    }
                });
            }
            Op::Log { a } => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        da[j] += gi / x[j];
                    }
                });
            }
            Op::Abs { a } => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        da[j] += gi * if x[j] > 0.0 { 1.0 } else if x[j] < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::ClampMin { a, floor } => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |da| {
                    for (j, &gi) in g.iter().enumerate() {
                        if x[j] > floor {
                            da[j] += gi;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let gi = g[0];
                self.accumulate(a, |da| {
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.value(a).numel() as f64;
                let gi = g[0] / n;
                self.accumulate(a, |da| {
                    for d in da.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = self.nodes[node].value.data().to_vec();
                let cols = *self.nodes[node].value.shape().last().unwrap();
                self.accumulate(a, |da| {
                    for r in 0..y.len() / cols {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..cols {
                            da[r * cols + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::Conv1d { input, kernel, pad_left } => {
                let (l, c_in) = match self.value(input).shape() {
                    [l] => (*l, 1),
                    [l, c] => (*l, *c),
                    _ => unreachable!("validated at record time"),
                };
                let ks = self.value(kernel).shape().to_vec();
                let (f_out, k_w) = (ks[0], ks[2]);
                let x = self.value(input).data().to_vec();
                let w = self.value(kernel).data().to_vec();
                self.accumulate(input, |dx| {
                    for t in 0..l {
                        for f in 0..f_out {
                            let gi = g[t * f_out + f];
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..k_w {
                                let src = t as isize + k as isize - pad_left as isize;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                for c in 0..c_in {
                                    dx[src as usize * c_in + c] += gi * w[(f * c_in + c) * k_w + k];
                                }
                            }
                        }
                    }
                });
                self.accumulate(kernel, |dw| {
                    for t in 0..l {
                        for f in 0..f_out {
                            let gi = g[t * f_out + f];
                            if gi == 0.0 {
                                continue;
                            }
                            for k in 0..k_w {
                                let src = t as isize + k as isize - pad_left as isize;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                for c in 0..c_in {
                                    dw[(f * c_in + c) * k_w + k] += gi * x[src as usize * c_in + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::Embed { table, ref indices } => {
                let dim = self.value(table).shape()[1];
                let idx = indices.clone();
                self.accumulate(table, |dt| {
                    for (row, &i) in idx.iter().enumerate() {
                        for e in 0..dim {
                            dt[i * dim + e] += g[row * dim + e];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(a, |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
        }
    }

    /// Shared backward for add/sub/mul under the supported broadcasts.
    /// `coef(x, y)` returns the local derivatives (d/dx, d/dy).
    fn binary_backward(&mut self, a: Var, b: Var, g: &[f64], coef: impl Fn(f64, f64) -> (f64, f64)) {
        let bc = broadcast_kind("backward", self.value(a).shape(), self.value(b).shape())
            .expect("validated at record time");
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let cols_a = if self.value(a).shape().len() == 2 { self.value(a).shape()[1] } else { 0 };
        let cols_b = if self.value(b).shape().len() == 2 { self.value(b).shape()[1] } else { 0 };

        let pair = |i: usize| -> (f64, f64) {
            match bc {
                Broadcast::Same => (av[i], bv[i]),
                Broadcast::ScalarRhs => (av[i], bv[0]),
                Broadcast::ScalarLhs => (av[0], bv[i]),
                Broadcast::RowRhs => (av[i], bv[i % cols_a]),
                Broadcast::RowLhs => (av[i % cols_b], bv[i]),
            }
        };

        self.accumulate(a, |da| match bc {
            Broadcast::Same | Broadcast::ScalarRhs | Broadcast::RowRhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    da[i] += gi * coef(x, y).0;
                }
            }
            Broadcast::ScalarLhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    da[0] += gi * coef(x, y).0;
                }
            }
            Broadcast::RowLhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    da[i % cols_b] += gi * coef(x, y).0;
                }
            }
        });
        self.accumulate(b, |db| match bc {
            Broadcast::Same | Broadcast::ScalarLhs | Broadcast::RowLhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    db[i] += gi * coef(x, y).1;
                }
            }
            Broadcast::ScalarRhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    db[0] += gi * coef(x, y).1;
                }
            }
            Broadcast::RowRhs => {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = pair(i);
                    db[i % cols_a] += gi * coef(x, y).1;
                }
            }
        });
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, Vec<usize>)> {
    match (a, b) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *k1, *n, vec![*m, *n])),
        ([k1], [k2, n]) if k1 == k2 => Ok((1, *k1, *n, vec![*n])),
        ([m, k1], [k2]) if k1 == k2 => Ok((*m, *k1, 1, vec![*m])),
        _ => Err(Error::ShapeMismatch { op: "matmul", details: format!("{a:?} x {b:?}") }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Finite-difference check of a scalar tensor program against the tape's
/// analytic gradients. Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over every
/// component of every input.
///
/// `f` must be a pure function of its inputs: any randomness has to be
/// seeded inside the closure so repeated evaluations agree.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("step size {h} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::contract("grad_check requires a scalar-valued program"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad_of(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            work[ti].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 3], &mut rng);
        let eye = Tensor::from_vec(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(eye);
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out).data(), a.data());
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[4], &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let z = tape.constant(Tensor::zeros(&[4]));
        let out = tape.add(a, z).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[5]));
        let out = tape.tanh(z).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(v).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_known_ratio() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.0, 2.0f64.ln()]));
        let s = tape.softmax(v).unwrap();
        assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        // max-subtraction identity: softmax(v) == softmax(v - c)
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let shifted = tape.constant(Tensor::vector(vec![0.0, -1000.0]));
        let s1 = tape.softmax(v).unwrap();
        let s2 = tape.softmax(shifted).unwrap();
        let (p1, p2) = (tape.value(s1).data().to_vec(), tape.value(s2).data().to_vec());
        assert!(p1[0] > 0.999_999 && p1[1] < 1e-6);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rand_tensor(&[4, 6], &mut rng);
            let c = rng.gen_range(-5.0..5.0);
            let shifted = Tensor::from_vec(
                vec![4, 6],
                x.data().iter().map(|v| v + c).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(shifted);
            let sa = tape.softmax(a).unwrap();
            let sb = tape.softmax(b).unwrap();
            for r in 0..4 {
                let sum: f64 = tape.value(sa).row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]), true);
        let s = tape.softmax(v).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad_of(v).unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_shared_leaf() {
        // loss = x*x + 3x => dloss/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let sq = tape.mul(x, x).unwrap();
        let tripled = tape.scale(x, 3.0).unwrap();
        let loss = tape.add(sq, tripled).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[6], &mut rng);
        let build = |tape: &mut Tape, v: Var| -> (Var, Var) {
            let t = tape.tanh(v).unwrap();
            let l1 = tape.sum(t).unwrap();
            let s = tape.softmax(v).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let l2 = tape.sum(sq).unwrap();
            (l1, l2)
        };

        let grad_for = |loss_select: u8| -> Vec<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let (l1, l2) = build(&mut tape, v);
            let loss = match loss_select {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad_of(v).unwrap().to_vec()
        };

        let (g1, g2, gsum) = (grad_for(0), grad_for(1), grad_for(2));
        for i in 0..6 {
            assert!((gsum[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[8], &mut rng);
        let err = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dot-product grad check error {err}");
    }

    #[test]
    fn grad_check_constant_program_is_exact() {
        let x = Tensor::vector(vec![0.5, -0.25]);
        let err = grad_check(
            |tape, _vars| {
                let c = tape.constant(Tensor::scalar(4.0));
                tape.sum(c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|tape, vars| tape.sum(vars[0]), &[x], 0.1).is_err());
    }

    #[test]
    fn three_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w1 = rand_tensor(&[5, 7], &mut rng);
        let w2 = rand_tensor(&[7, 4], &mut rng);
        let w3 = rand_tensor(&[4, 1], &mut rng);
        let x = rand_tensor(&[2, 5], &mut rng);
        let err = grad_check(
            |tape, vars| {
                let h1 = tape.matmul(vars[3], vars[0])?;
                let a1 = tape.tanh(h1)?;
                let h2 = tape.matmul(a1, vars[1])?;
                let a2 = tape.sigmoid(h2)?;
                let h3 = tape.matmul(a2, vars[2])?;
                tape.mean(h3)
            },
            &[w1, w2, w3, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "3-layer net grad check error {err}");
    }

    /// Finite-difference agreement for every primitive on randomized shapes.
    /// Inputs are kept away from the kinks of relu/abs/clamp and the pole of
    /// log so the central difference itself is trustworthy.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = rng.gen_range(2..5usize);
            let m = rng.gen_range(2..4usize);
            let n = rng.gen_range(2..4usize);

            let away = |t: &mut Tensor| {
                for v in t.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
            };

            let mut checks: Vec<(&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>)> =
                Vec::new();

            let a2 = rand_tensor(&[m, l], &mut rng);
            let b2 = rand_tensor(&[l, n], &mut rng);
            checks.push((
                "matmul",
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.matmul(v[0], v[1])?;
                    t.sum(y)
                }),
                vec![a2.clone(), b2.clone()],
            ));
            checks.push((
                "add_row_broadcast",
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[m, n], &mut rng), rand_tensor(&[n], &mut rng)],
            ));
            checks.push((
                "sub_scalar_broadcast",
                Box::new(|t, v| {
                    let y = t.sub(v[0], v[1])?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[m, n], &mut rng), Tensor::scalar(0.7)],
            ));
            checks.push((
                "mul",
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    t.sum(y)
                }),
                vec![rand_tensor(&[l], &mut rng), rand_tensor(&[l], &mut rng)],
            ));
            checks.push((
                "concat_slice",
                Box::new(move |t, v| {
                    let c = t.concat(&[v[0], v[1]], 0)?;
                    let s = t.slice(c, 1, 2)?;
                    let sq = t.mul(s, s)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[2, n], &mut rng), rand_tensor(&[2, n], &mut rng)],
            ));
            let unaries: [(&'static str, fn(&mut Tape, Var) -> Result<Var>); 3] = [
                ("tanh", |t, a| t.tanh(a)),
                ("sigmoid", |t, a| t.sigmoid(a)),
                ("exp", |t, a| t.exp(a)),
            ];
            for (name, f) in unaries {
                let x = rand_tensor(&[l], &mut rng);
                checks.push((
                    name,
                    Box::new(move |t, v| {
                        let y = f(t, v[0])?;
                        t.sum(y)
                    }),
                    vec![x],
                ));
            }
            let mut xr = rand_tensor(&[l], &mut rng);
            away(&mut xr);
            checks.push((
                "relu",
                Box::new(|t, v| {
                    let y = t.relu(v[0])?;
                    t.sum(y)
                }),
                vec![xr],
            ));
            let mut xa = rand_tensor(&[l], &mut rng);
            away(&mut xa);
            checks.push((
                "abs",
                Box::new(|t, v| {
                    let y = t.abs(v[0])?;
                    t.sum(y)
                }),
                vec![xa],
            ));
            let xl = Tensor::from_vec(
                vec![l],
                (0..l).map(|i| 0.5 + 0.3 * i as f64).collect(),
            )
            .unwrap();
            checks.push((
                "log",
                Box::new(|t, v| {
                    let y = t.log(v[0])?;
                    t.sum(y)
                }),
                vec![xl],
            ));
            let mut xc = rand_tensor(&[l], &mut rng);
            away(&mut xc);
            checks.push((
                "clamp_min",
                Box::new(|t, v| {
                    let y = t.clamp_min(v[0], 0.0)?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                }),
                vec![xc],
            ));
            checks.push((
                "mean",
                Box::new(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    t.mean(sq)
                }),
                vec![rand_tensor(&[m, n], &mut rng)],
            ));
            checks.push((
                "softmax",
                Box::new(|t, v| {
                    let s = t.softmax(v[0])?;
                    let sq = t.mul(s, s)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[m, n], &mut rng)],
            ));
            checks.push((
                "conv1d",
                Box::new(|t, v| {
                    let y = t.conv1d(v[0], v[1])?;
                    let sq = t.mul(y, y)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[5, 2], &mut rng), rand_tensor(&[3, 2, 3], &mut rng)],
            ));
            checks.push((
                "embedding_lookup",
                Box::new(|t, v| {
                    let e = t.embed(v[0], &[0, 2, 2])?;
                    let sq = t.mul(e, e)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[4, 3], &mut rng)],
            ));
            checks.push((
                "reshape_scale",
                Box::new(move |t, v| {
                    let r = t.reshape(v[0], &[n, m])?;
                    let s = t.scale(r, 2.5)?;
                    let sq = t.mul(s, s)?;
                    t.sum(sq)
                }),
                vec![rand_tensor(&[m, n], &mut rng)],
            ));

            for (name, f, inputs) in checks {
                let err = grad_check(&f, &inputs, 1e-5).unwrap();
                assert!(err < 1e-4, "primitive {name} seed {seed}: grad error {err}");
            }
        }
    }

    #[test]
    fn injected_tanh_fault_is_caught() {
        let x = Tensor::vector(vec![0.4, -0.7, 1.1]);
        // sane tape passes
        let err = grad_check(
            |tape, vars| {
                let y = tape.tanh(vars[0])?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);

        // corrupted tanh backward must blow past the tolerance
        let mut tape = Tape::new();
        tape.inject_backward_fault("tanh");
        let v = tape.leaf(x.clone(), true);
        let y = tape.tanh(v).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let corrupt = tape.grad_of(v).unwrap().to_vec();

        let clean_err: f64 = {
            let mut tape = Tape::new();
            let v = tape.leaf(x, true);
            let y = tape.tanh(v).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            let clean = tape.grad_of(v).unwrap();
            corrupt
                .iter()
                .zip(clean)
                .map(|(c, g)| (c - g).abs() / g.abs().max(1e-8))
                .fold(0.0, f64::max)
        };
        assert!(clean_err > 1e-4);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"));
    }

    #[test]
    fn log_of_negative_input_is_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(tape.log(a), Err(Error::NonFinite { op: "log", .. })));
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let frozen = tape.leaf(Tensor::scalar(5.0), false);
        let y = tape.mul(x, frozen).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[5.0]);
        assert!(tape.grad_of(frozen).is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let cut = tape.detach(sq);
        let y = tape.mul(cut, x).unwrap(); // y = detach(x^2) * x
        tape.backward(y).unwrap();
        assert_eq!(tape.grad_of(x).unwrap(), &[9.0]); // only the direct factor
    }
}
