//! Reverse-mode tape.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and the backward pass is a single reverse sweep.

use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{matmul_into, slice_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Var, Var),
    ConcatRows(Var, Var),
    Slice { src: Var, axis: usize, start: usize },
    Transpose(Var),
    L2Normalize(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    MaskedLogSumExp(Var, Rc<Vec<bool>>),
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A tape of differentiable operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// `rhs` broadcasts onto `lhs` when it equals a trailing slice of `lhs`'s shape.
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` (zeros before any backward pass reaches it).
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push_raw(value, Op::Leaf, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("constant")?;
        Ok(self.push_raw(value, Op::Leaf, false))
    }

    /// Registers parameter `name` of `store` as a leaf. Parameters of a
    /// frozen store enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?.clone();
        if store.is_frozen() {
            return self.constant(value);
        }
        let v = self.leaf(value)?;
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (v, name) in &self.bindings {
            if let Some(g) = &self.nodes[v.0].grad {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("sub", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcasts(va.shape(), vb.shape()) {
            return Err(mismatch(op, va, vb));
        }
        let block = vb.numel().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % block]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {:?}", va.shape())));
        }
        let shape = va.shape();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += va.data()[base + i];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let out = Tensor::new(new_shape, out)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        if extent == 0 {
            return Err(Error::Empty("mean_axis input"));
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / extent as f64)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() == 0 || va.rank() != vb.rank() || va.shape()[..va.rank() - 1] != vb.shape()[..vb.rank() - 1] {
            return Err(mismatch("concat", va, vb));
        }
        let (p, q) = (va.last_dim(), vb.last_dim());
        let rows = va.outer_len().max(vb.outer_len());
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = p + q;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(a, b), &[a, b])
    }

    /// Concatenate along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() == 0 || va.rank() != vb.rank() || va.shape()[1..] != vb.shape()[1..] {
            return Err(mismatch("concat_rows", va, vb));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let out = Tensor::new(shape, data)?;
        self.push("concat_rows", out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = slice_axis(self.value(a), axis, start, end)?;
        self.push("slice", out, Op::Slice { src: a, axis, start }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Divide each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let mut norms = Vec::with_capacity(va.outer_len());
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.outer_len() {
            let row = &va.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            data.extend(row.iter().map(|x| x / n));
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("l2_normalize", out, Op::L2Normalize(a, norms), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.outer_len() {
            let row = &va.data()[r * d..(r + 1) * d];
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Max-shifted log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.outer_len() {
            let row = &va.data()[r * d..(r + 1) * d];
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// `out[i] = a[i, index[i]]` for a rank-2 `a`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || va.shape()[0] != index.len() {
            return Err(Error::ShapeMismatch { op: "pick", lhs: va.shape().to_vec(), rhs: vec![index.len()] });
        }
        let cols = va.shape()[1];
        let mut data = Vec::with_capacity(index.len());
        for (r, &c) in index.iter().enumerate() {
            if c >= cols {
                return Err(Error::invalid("pick", format!("index {c} out of range for {cols} columns")));
            }
            data.push(va.data()[r * cols + c]);
        }
        let out = Tensor::vector(data);
        self.push("pick", out, Op::Pick(a, index.to_vec()), &[a])
    }

    /// Row-wise `log sum_j mask[i,j] exp(a[i,j])` for a rank-2 `a`.
    /// Rows with an empty mask evaluate to 0 and pass no gradient.
    pub fn masked_log_sum_exp(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 || mask.len() != va.numel() {
            return Err(Error::ShapeMismatch { op: "masked_log_sum_exp", lhs: va.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let d = va.shape()[1];
        let mut data = Vec::with_capacity(va.shape()[0]);
        for r in 0..va.shape()[0] {
            let row = &va.data()[r * d..(r + 1) * d];
            let m = &mask[r * d..(r + 1) * d];
            let peak = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if peak == f64::NEG_INFINITY {
                data.push(0.0);
                continue;
            }
            let s: f64 = row.iter().zip(m).filter(|(_, &keep)| keep).map(|(&x, _)| (x - peak).exp()).sum();
            data.push(peak + s.ln());
        }
        let out = Tensor::vector(data);
        self.push("masked_log_sum_exp", out, Op::MaskedLogSumExp(a, mask), &[a])
    }

    /// Pairwise squared Euclidean distances between the rows of `a` `[n, d]`
    /// and `b` `[m, d]`, shape `[n, m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(mismatch("sq_dist", va, vb));
        }
        let (n, m) = (va.shape()[0], vb.shape()[0]);
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(va.row(i).iter().zip(vb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push("sq_dist", out, Op::SqDist(a, b), &[a, b])
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates `d root / d node` into the gradient of every node that
    /// requires one. Calling twice without zeroing adds the gradients twice.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clear every accumulated gradient on the tape.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = vb.transpose()?;
                    let mut da = vec![0.0; n * k];
                    matmul_into(g.data(), bt.data(), &mut da, n, m, k);
                    send(*a, Tensor::new(vec![n, k], da)?);
                }
                if self.requires_grad(*b) {
                    let at = va.transpose()?;
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g.data(), &mut db, k, n, m);
                    send(*b, Tensor::new(vec![k, m], db)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                if self.requires_grad(*b) {
                    send(*b, reduce_broadcast(g, self.value(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let block = vb.numel().max(1);
                if self.requires_grad(*a) {
                    let data = g.data().iter().enumerate().map(|(j, &gv)| gv * vb.data()[j % block]).collect();
                    send(*a, Tensor::new(va.shape().to_vec(), data)?);
                }
                if self.requires_grad(*b) {
                    let prod = zip_map(va, &|gv, av| gv * av);
                    send(*b, reduce_broadcast(&prod, vb.shape()));
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Sigmoid(a) => send(*a, zip_map(y, &|gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => send(*a, zip_map(y, &|gv, t| gv * (1.0 - t * t))),
            Op::Relu(a) => send(*a, zip_map(self.value(*a), &|gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Exp(a) => send(*a, zip_map(y, &|gv, e| gv * e)),
            Op::Log(a) => send(*a, zip_map(self.value(*a), &|gv, x| gv / x)),
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let extent = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        data[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                send(*a, Tensor::new(shape, data)?);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape();
                send(*a, Tensor::full(shape, g.item()));
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = g.outer_len();
                let mut da = Vec::with_capacity(rows * p);
                let mut db = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                send(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                send(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).numel();
                let da = Tensor::new(self.value(*a).shape().to_vec(), g.data()[..split].to_vec())?;
                let db = Tensor::new(self.value(*b).shape().to_vec(), g.data()[split..].to_vec())?;
                send(*a, da);
                send(*b, db);
            }
            Op::Slice { src, axis, start } => {
                let shape = self.value(*src).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let extent = shape[*axis];
                let width = g.shape()[*axis] * inner;
                let mut data = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    data[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                send(*src, Tensor::new(shape, data)?);
            }
            Op::Transpose(a) => send(*a, g.transpose()?),
            Op::L2Normalize(a, norms) => {
                let d = y.last_dim();
                let mut data = Vec::with_capacity(y.numel());
                let x = self.value(*a);
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw_norm < NORM_FLOOR {
                        data.extend(gr.iter().map(|gv| gv / n));
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                    }
                }
                send(*a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Softmax(a) => {
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.outer_len() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                send(*a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::LogSoftmax(a) => {
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.outer_len() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * total));
                }
                send(*a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Pick(a, index) => {
                let shape = self.value(*a).shape().to_vec();
                let cols = shape[1];
                let mut data = vec![0.0; shape[0] * cols];
                for (r, &c) in index.iter().enumerate() {
                    data[r * cols + c] = g.data()[r];
                }
                send(*a, Tensor::new(shape, data)?);
            }
            Op::MaskedLogSumExp(a, mask) => {
                let x = self.value(*a);
                let d = x.shape()[1];
                let mut data = vec![0.0; x.numel()];
                for r in 0..x.shape()[0] {
                    let lse = y.data()[r];
                    for j in 0..d {
                        let idx = r * d + j;
                        if mask[idx] {
                            data[idx] = g.data()[r] * (x.data()[idx] - lse).exp();
                        }
                    }
                }
                send(*a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::SqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (va.shape()[0], vb.shape()[0], va.shape()[1]);
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = 2.0 * g.data()[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = va.data()[i * d + t] - vb.data()[j * d + t];
                            da[i * d + t] += gv * diff;
                            db[j * d + t] -= gv * diff;
                        }
                    }
                }
                send(*a, Tensor::new(vec![n, d], da)?);
                send(*b, Tensor::new(vec![m, d], db)?);
            }
        }
        Ok(())
    }
}

/// Sum `g` over the leading axes that were broadcast to reach it from `shape`.
fn reduce_broadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    let block: usize = shape.iter().product();
    let mut out = vec![0.0; block];
    if block > 0 {
        for (j, &v) in g.data().iter().enumerate() {
            out[j % block] += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("block size matches shape")
}
