use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::kernels::{self, axis_split};
use super::{numel, Tensor};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    MulChannel(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Relu(usize),
    ClampMin(usize, f64),
    Prelu(usize, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    VarAxis(usize, usize),
    MaxAxis(usize, usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    Depthwise {
        x: usize,
        w: usize,
        dilation: usize,
    },
    Detach,
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run recording of a computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Tape::backward`] walks it in reverse once. A tape
/// is meant to live for one forward/backward pass and is not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf sharing an existing buffer; no copy is made.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, inputs: &[usize], op: Op) -> Var<'_> {
        let rg = inputs.iter().any(|&i| self.needs(i));
        self.push(value, rg, op)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            bail!(Usage, "concat of zero tensors");
        };
        let base = first.shape();
        if axis >= base.len() {
            bail!(Usage, "concat axis {} out of range for {:?}", axis, base);
        }
        let mut total = 0;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let t = Tensor::new(&shape, out)?;
        Ok(self.record(t, &ids, Op::Concat(ids.clone(), axis)))
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(v.value().shape(), g.clone()).expect("grad shape"))
    }

    /// Reverse pass from a scalar node. Afterwards [`Tape::grad`] returns
    /// `d target / d v` for every differentiable node that reaches `target`.
    /// Contributions from multiple consumers are summed.
    pub fn backward(&self, target: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[target.id].value.len() != 1 {
            bail!(
                Usage,
                "backward needs a scalar target, got shape {:?}",
                nodes[target.id].value.shape()
            );
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[target.id] = Some(vec![1.0]);
        for id in (0..=target.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// Accumulate `g` into a possibly scalar-broadcast operand.
fn acc_broadcast(dst: &mut [f64], g: &[f64], f: impl Fn(usize) -> f64) {
    if dst.len() == g.len() {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += g[i] * f(i);
        }
    } else {
        dst[0] += g.iter().enumerate().map(|(i, gi)| gi * f(i)).sum::<f64>();
    }
}

fn pick(v: &Tensor, i: usize) -> f64 {
    if v.len() == 1 {
        v.data()[0]
    } else {
        v.data()[i]
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.clone();
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Add(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                acc_broadcast(d, g, |_| 1.0);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                acc_broadcast(d, g, |_| 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                acc_broadcast(d, g, |_| 1.0);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                acc_broadcast(d, g, |_| -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                acc_broadcast(d, g, |i| pick(&vb, i));
            }
            if let Some(d) = slot(nodes, grads, *b) {
                acc_broadcast(d, g, |i| pick(&va, i));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                acc_broadcast(d, g, |i| 1.0 / pick(&vb, i));
            }
            if let Some(d) = slot(nodes, grads, *b) {
                acc_broadcast(d, g, |i| {
                    let q = pick(&vb, i);
                    -pick(&va, i) / (q * q)
                });
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += c * gi;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += gi;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if let Some(d) = slot(nodes, grads, *a) {
                kernels::matmul_a_bt_acc(g, vb.data(), m, n, k, d);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                kernels::matmul_at_b_acc(va.data(), g, m, k, n, d);
            }
        }
        Op::AddBias(x, b) => {
            let t = y.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += gi;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for (c, dc) in d.iter_mut().enumerate() {
                    *dc += g[c * t..(c + 1) * t].iter().sum::<f64>();
                }
            }
        }
        Op::MulChannel(x, s) => {
            let (vx, vs) = (val(*x), val(*s));
            let t = y.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, di) in d.iter_mut().enumerate() {
                    *di += g[i] * vs.data()[i / t];
                }
            }
            if let Some(d) = slot(nodes, grads, *s) {
                for (c, dc) in d.iter_mut().enumerate() {
                    let r = c * t..(c + 1) * t;
                    *dc += kernels::dot(&g[r.clone()], &vx.data()[r]);
                }
            }
        }
        Op::Concat(ids, axis) => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let row = y.shape()[*axis] * inner;
            let mut offset = 0;
            for &id in ids {
                let block = nodes[id].value.shape()[*axis] * inner;
                if let Some(d) = slot(nodes, grads, id) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + block];
                        for (di, gi) in d[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *di += gi;
                        }
                    }
                }
                offset += block;
            }
        }
        Op::Slice { src, axis, start } => {
            let src_shape = nodes[*src].value.shape().to_vec();
            let (outer, n, inner) = axis_split(&src_shape, *axis);
            let len = y.shape()[*axis];
            if let Some(d) = slot(nodes, grads, *src) {
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let gs = &g[o * len * inner..(o + 1) * len * inner];
                    for (di, gi) in d[base..base + len * inner].iter_mut().zip(gs) {
                        *di += gi;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (y.shape()[0], y.shape()[1]);
            if let Some(d) = slot(nodes, grads, *a) {
                // y is r x c, the source is c x r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *di += gi * yi;
                }
            }
        }
        Op::Log(a) => {
            let va = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(va.data()) {
                    *di += gi / xi;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *di += gi / (2.0 * yi);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(y.data()) {
                    *di += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Relu(a) => {
            let va = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(va.data()) {
                    if *xi > 0.0 {
                        *di += gi;
                    }
                }
            }
        }
        Op::ClampMin(a, floor) => {
            let va = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(va.data()) {
                    if *xi > *floor {
                        *di += gi;
                    }
                }
            }
        }
        Op::Prelu(x, s) => {
            let (vx, vs) = (val(*x), val(*s));
            let t = y.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, di) in d.iter_mut().enumerate() {
                    let slope = if vx.data()[i] > 0.0 {
                        1.0
                    } else {
                        vs.data()[i / t]
                    };
                    *di += g[i] * slope;
                }
            }
            if let Some(d) = slot(nodes, grads, *s) {
                for (c, dc) in d.iter_mut().enumerate() {
                    let span = c * t..(c + 1) * t;
                    for (&gi, &xi) in g[span.clone()].iter().zip(&vx.data()[span]) {
                        if xi <= 0.0 {
                            *dc += gi * xi;
                        }
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let s: f64 = (0..n).map(|i| g[idx(i)] * y.data()[idx(i)]).sum();
                        for i in 0..n {
                            d[idx(i)] += y.data()[idx(i)] * (g[idx(i)] - s);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let s: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            d[idx(i)] += g[idx(i)] - libm::exp(y.data()[idx(i)]) * s;
                        }
                    }
                }
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let src_shape = nodes[*a].value.shape().to_vec();
            let (outer, n, inner) = axis_split(&src_shape, *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            d[o * n * inner + i * inner + j] += scale * g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::VarAxis(a, axis) => {
            let va = val(*a);
            let (outer, n, inner) = axis_split(va.shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| o * n * inner + i * inner + j;
                        let mean = (0..n).map(|i| va.data()[idx(i)]).sum::<f64>() / n as f64;
                        let go = g[o * inner + j];
                        for i in 0..n {
                            d[idx(i)] += go * 2.0 * (va.data()[idx(i)] - mean) / n as f64;
                        }
                    }
                }
            }
        }
        Op::MaxAxis(a, axis, argmax) => {
            let src_shape = nodes[*a].value.shape().to_vec();
            let (_, n, inner) = axis_split(&src_shape, *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for (k, &i) in argmax.iter().enumerate() {
                    let (o, j) = (k / inner, k % inner);
                    d[o * n * inner + i * inner + j] += g[k];
                }
            }
        }
        Op::SumAll(a) | Op::MeanAll(a) => {
            let n = nodes[*a].value.len();
            let scale = if matches!(node.op, Op::MeanAll(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            if let Some(d) = slot(nodes, grads, *a) {
                for di in d.iter_mut() {
                    *di += scale;
                }
            }
        }
        Op::Depthwise { x, w, dilation } => {
            let (vx, vw) = (val(*x), val(*w));
            let (c, t) = (vx.shape()[0], vx.shape()[1]);
            let taps = vw.shape()[1];
            let pad = kernels::same_padding(taps, *dilation) as isize;
            if let Some(d) = slot(nodes, grads, *x) {
                for ch in 0..c {
                    for k in 0..taps {
                        let wk = vw.data()[ch * taps + k];
                        let shift = (k * dilation) as isize - pad;
                        let (t0, t1) = kernels::valid_range(shift, t);
                        for tt in t0..t1 {
                            d[ch * t + (tt as isize + shift) as usize] += wk * g[ch * t + tt];
                        }
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *w) {
                for ch in 0..c {
                    for k in 0..taps {
                        let shift = (k * dilation) as isize - pad;
                        let (t0, t1) = kernels::valid_range(shift, t);
                        let mut s = 0.0;
                        for tt in t0..t1 {
                            s += g[ch * t + tt] * vx.data()[ch * t + (tt as isize + shift) as usize];
                        }
                        d[ch * taps + k] += s;
                    }
                }
            }
        }
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Arc<Tensor>> {
        let v = self.value();
        if axis >= v.ndim() {
            bail!(Usage, "{}: axis {} out of range for {:?}", op, axis, v.shape());
        }
        Ok(v)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(v.shape(), data).expect("unary shape");
        self.tape.record(t, &[self.id], op)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = same_or_scalar(name, &a, &b)?;
        let n = numel(&shape);
        let data = (0..n).map(|i| f(pick(&a, i), pick(&b, i))).collect();
        Ok(self
            .tape
            .record(Tensor::new(&shape, data)?, &[self.id, other.id], op))
    }

    /// Elementwise sum; equal shapes, or one side a single element.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `[m x k] * [k x n] -> [m x n]`
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (Ok((m, k)), Ok((k2, n))) = (a.dims2(), b.dims2()) else {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        };
        if k != k2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
        Ok(self.tape.record(
            Tensor::new(&[m, n], out)?,
            &[self.id, other.id],
            Op::MatMul(self.id, other.id),
        ))
    }

    fn per_channel(&self, other: &Var<'t>, name: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>, usize)> {
        let (x, b) = (self.value(), other.value());
        match (x.dims2(), b.shape()) {
            (Ok((c, t)), [cb]) if *cb == c => Ok((x, b, t)),
            _ => Err(Error::shape(name, x.shape(), b.shape())),
        }
    }

    /// `x[c,t] + b[c]` for `x: [C x T]`, `b: [C]`.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b, t) = self.per_channel(bias, "add_bias")?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i / t])
            .collect();
        Ok(self.tape.record(
            Tensor::new(x.shape(), data)?,
            &[self.id, bias.id],
            Op::AddBias(self.id, bias.id),
        ))
    }

    /// `x[c,t] * s[c]` for `x: [C x T]`, `s: [C]`.
    pub fn mul_channel(&self, scale: &Var<'t>) -> Result<Var<'t>> {
        let (x, s, t) = self.per_channel(scale, "mul_channel")?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * s.data()[i / t])
            .collect();
        Ok(self.tape.record(
            Tensor::new(x.shape(), data)?,
            &[self.id, scale.id],
            Op::MulChannel(self.id, scale.id),
        ))
    }

    /// Parametric ReLU with one slope per row of `x: [C x T]`.
    pub fn prelu(&self, slope: &Var<'t>) -> Result<Var<'t>> {
        let (x, s, t) = self.per_channel(slope, "prelu")?;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { s.data()[i / t] * v })
            .collect();
        Ok(self.tape.record(
            Tensor::new(x.shape(), data)?,
            &[self.id, slope.id],
            Op::Prelu(self.id, slope.id),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.check_axis("slice", axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        if len == 0 || start + len > n {
            bail!(
                Usage,
                "slice [{}, {}) out of range for axis {} of {:?}",
                start,
                start + len,
                axis,
                v.shape()
            );
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.record(
            Tensor::new(&shape, out)?,
            &[self.id],
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.record(t, &[self.id], Op::Reshape(self.id)))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let t = self.value().transpose()?;
        Ok(self.tape.record(t, &[self.id], Op::Transpose(self.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), libm::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), libm::log)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), libm::sqrt)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), libm::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, floor), |x| if x > floor { x } else { floor })
    }

    /// Same value, but no gradient flows back through it.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push((*v).clone(), false, Op::Detach)
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Var<'t>> {
        let v = self.check_axis("softmax", axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| v.data()[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|i| libm::exp(v.data()[idx(i)] - m)).sum();
                let lz = libm::log(z);
                for i in 0..n {
                    let s = v.data()[idx(i)] - m;
                    out[idx(i)] = if log { s - lz } else { libm::exp(s) / z };
                }
            }
        }
        let op = if log {
            Op::LogSoftmax(self.id, axis)
        } else {
            Op::Softmax(self.id, axis)
        };
        Ok(self.tape.record(Tensor::new(v.shape(), out)?, &[self.id], op))
    }

    /// Normalized exponentials along `axis`, computed with the max shift.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    fn reduce(&self, name: &'static str, axis: usize, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>> {
        let v = self.check_axis(name, axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for j in 0..inner {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = v.data()[o * n * inner + i * inner + j];
                }
                out[o * inner + j] = f(&buf);
            }
        }
        let shape = reduced_shape(v.shape(), axis);
        Ok(self.tape.record(Tensor::new(&shape, out)?, &[self.id], op))
    }

    /// Sum over `axis`, which is removed from the shape (a 1-D input gives `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce("sum_axis", axis, Op::SumAxis(self.id, axis), |s| s.iter().sum())
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce("mean_axis", axis, Op::MeanAxis(self.id, axis), |s| {
            s.iter().sum::<f64>() / s.len() as f64
        })
    }

    /// Biased (`1/n`) variance over `axis`.
    pub fn var_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce("var_axis", axis, Op::VarAxis(self.id, axis), |s| {
            let n = s.len() as f64;
            let m = s.iter().sum::<f64>() / n;
            s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
        })
    }

    /// Maximum over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = self.check_axis("max_axis", axis)?;
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                for i in 1..n {
                    if v.data()[o * n * inner + i * inner + j] > v.data()[o * n * inner + best * inner + j] {
                        best = i;
                    }
                }
                out[o * inner + j] = v.data()[o * n * inner + best * inner + j];
                arg[o * inner + j] = best;
            }
        }
        let shape = reduced_shape(v.shape(), axis);
        Ok(self
            .tape
            .record(Tensor::new(&shape, out)?, &[self.id], Op::MaxAxis(self.id, axis, arg)))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), &[self.id], Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.tape.record(Tensor::scalar(s), &[self.id], Op::MeanAll(self.id))
    }

    /// Depthwise dilated 1-D convolution with symmetric zero padding.
    ///
    /// `x: [C x T]`, `kernel: [C x K]` with odd `K`. Output frame `t` is
    /// `sum_k kernel[c,k] * x[c, t + k*d - (K-1)*d/2]`, so the temporal
    /// extent is preserved.
    pub fn depthwise_conv1d(&self, kernel: &Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (Ok((c, t)), Ok((cw, taps))) = (x.dims2(), w.dims2()) else {
            return Err(Error::shape("depthwise_conv1d", x.shape(), w.shape()));
        };
        if c != cw {
            return Err(Error::shape("depthwise_conv1d", x.shape(), w.shape()));
        }
        if taps % 2 == 0 || dilation == 0 {
            bail!(
                Config,
                "depthwise_conv1d needs an odd kernel and dilation >= 1 (K={}, d={})",
                taps,
                dilation
            );
        }
        let mut out = vec![0.0; c * t];
        kernels::depthwise_forward(x.data(), w.data(), c, t, taps, dilation, &mut out);
        Ok(self.tape.record(
            Tensor::new(&[c, t], out)?,
            &[self.id, kernel.id],
            Op::Depthwise {
                x: self.id,
                w: kernel.id,
                dilation,
            },
        ))
    }
}
