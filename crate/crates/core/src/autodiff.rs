//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only record of operations. Every op appends one
//! node holding its forward value; [`Tape::backward`] walks the nodes in
//! strict reverse append order and accumulates gradients additively.
//! Elementwise binary ops broadcast their right operand over leading
//! extents only (the right shape must be a suffix of the left shape).

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, permute_data, split_matrix, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Matmul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    param: bool,
}

/// Append-only differentiation record. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn unary_map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool, param: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            tracked,
            param,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].tracked)
        };
        self.push(value, op, tracked, false)
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (xs, ys) = (x.shape(), y.shape());
            if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
                return Err(Error::shape(name, xs, ys));
            }
            let nb = y.numel();
            let yd = y.data();
            let data = x.data().iter().enumerate().map(|(i, &xv)| f(xv, yd[i % nb])).collect();
            Tensor::new(xs, data)?
        };
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let value = unary_map(&self.value(a), |x| x + c);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&self, a: Var, c: T) -> Var {
        let value = unary_map(&self.value(a), |x| x * c);
        self.push_op(value, Op::MulScalar(a, c), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    /// `[.., n, k] · [k, m]` (shared right operand) or `[B, n, k] · [B, k, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (xs, ys) = (x.shape(), y.shape());
            let err = || Error::shape("matmul", xs, ys);
            if xs.len() < 2 || ys.len() < 2 {
                return Err(err());
            }
            let (_, n, k) = split_matrix(xs);
            let (yb, k2, m) = split_matrix(ys);
            if k != k2 {
                return Err(err());
            }
            let mut out_shape = xs.to_vec();
            *out_shape.last_mut().unwrap() = m;
            let rows = x.numel() / k;
            let mut out = vec![T::zero(); rows * m];
            if ys.len() == 2 {
                tensor::gemm_acc(x.data(), y.data(), &mut out, rows, k, m);
            } else {
                if xs.len() != ys.len() || xs[..xs.len() - 2] != ys[..ys.len() - 2] {
                    return Err(err());
                }
                for bi in 0..yb {
                    tensor::gemm_acc(
                        &x.data()[bi * n * k..(bi + 1) * n * k],
                        &y.data()[bi * k * m..(bi + 1) * k * m],
                        &mut out[bi * n * m..(bi + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
            }
            Tensor::new(&out_shape, out)?
        };
        Ok(self.push_op(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = {
            let x = self.value(a);
            let rank = x.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute", x.shape(), perm));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            Tensor::new(&shape, permute_data(x.data(), x.shape(), perm))?
        };
        Ok(self.push_op(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = unary_map(&self.value(a), f);
        self.push_op(value, op, &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::domain("log", "argument must be positive"));
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::domain("sqrt", "argument must be non-negative"));
        }
        Ok(self.unary(a, |x| x.sqrt(), Op::Sqrt(a)))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        drop(v);
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let x = self.value(a);
            if axis >= x.rank() {
                return Err(Error::shape("sum_axis", x.shape(), &[axis]));
            }
            let (outer, len, inner) = around_axis(x.shape(), axis);
            let mut out = vec![T::zero(); outer * inner];
            let d = x.data();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        out[o * inner + i] = out[o * inner + i] + d[base + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.push_op(value, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", &self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, T::one() / T::lit(len as f64)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let n = *x.shape().last().unwrap();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(n) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::new(x.shape(), out).unwrap()
        };
        self.push_op(value, Op::Softmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: T) -> Var {
        let (value, inv_std) = {
            let x = self.value(a);
            let n = *x.shape().last().unwrap();
            let nf = T::lit(n as f64);
            let mut out = x.data().to_vec();
            let mut inv_std = Vec::with_capacity(out.len() / n);
            for row in out.chunks_mut(n) {
                let mu = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                let inv = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mu) * inv;
                }
                inv_std.push(inv);
            }
            (Tensor::new(x.shape(), out).unwrap(), inv_std)
        };
        self.push_op(value, Op::LayerNorm(a, inv_std), &[a])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", &first, &[axis]));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let same =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !same {
                    return Err(Error::shape("concat", &first, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = around_axis(&first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total;
            Tensor::new(&shape, out)?
        };
        Ok(self.push_op(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let x = self.value(a);
            if axis >= x.rank() || start >= end || end > x.shape()[axis] {
                return Err(Error::shape("slice", x.shape(), &[axis, start, end]));
            }
            let (outer, len, inner) = around_axis(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(&shape, out)?
        };
        Ok(self.push_op(value, Op::Slice(a, axis, start), &[a]))
    }

    /// Reverse pass from a one-element `loss`. Every parameter leaf created
    /// before `loss` receives a gradient (zeros when unused).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward", nodes[loss.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, contrib: Vec<T>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e = *e + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let elementwise = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Vec<T> {
                x.data().iter().zip(&g).map(|(&xv, &gv)| f(xv, gv)).collect()
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    let nb = val(*b).numel();
                    let mut gb = vec![T::zero(); nb];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + sign * gv;
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (val(*a).data(), val(*b).data());
                    let nb = y.len();
                    let ga = g.iter().enumerate().map(|(i, &gv)| gv * y[i % nb]).collect();
                    let mut gb = vec![T::zero(); nb];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + gv * x[i];
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a).data(), val(*b).data());
                    let nb = y.len();
                    let ga = g.iter().enumerate().map(|(i, &gv)| gv / y[i % nb]).collect();
                    let mut gb = vec![T::zero(); nb];
                    for (i, &gv) in g.iter().enumerate() {
                        let yv = y[i % nb];
                        gb[i % nb] = gb[i % nb] - gv * x[i] / (yv * yv);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::MulScalar(a, c) => acc(*a, g.iter().map(|&gv| gv * *c).collect()),
                Op::Matmul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (_, n, k) = split_matrix(x.shape());
                    let (yb, _, m) = split_matrix(y.shape());
                    let mut ga = vec![T::zero(); x.numel()];
                    let mut gb = vec![T::zero(); y.numel()];
                    if y.rank() == 2 {
                        let rows = x.numel() / k;
                        tensor::gemm_nt_acc(&g, y.data(), &mut ga, rows, m, k);
                        tensor::gemm_tn_acc(x.data(), &g, &mut gb, rows, k, m);
                    } else {
                        for bi in 0..yb {
                            let gs = &g[bi * n * m..(bi + 1) * n * m];
                            tensor::gemm_nt_acc(
                                gs,
                                &y.data()[bi * k * m..(bi + 1) * k * m],
                                &mut ga[bi * n * k..(bi + 1) * n * k],
                                n,
                                m,
                                k,
                            );
                            tensor::gemm_tn_acc(
                                &x.data()[bi * n * k..(bi + 1) * n * k],
                                gs,
                                &mut gb[bi * k * m..(bi + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(*a, permute_data(&g, node.value.shape(), &inv));
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc(
                        *a,
                        g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect(),
                    );
                }
                Op::Relu(a) => acc(
                    *a,
                    elementwise(val(*a), &|x, gv| if x > T::zero() { gv } else { T::zero() }),
                ),
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
                }
                Op::Log(a) => acc(*a, elementwise(val(*a), &|x, gv| gv / x)),
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    let two = T::lit(2.0);
                    acc(*a, g.iter().zip(y).map(|(&gv, &yv)| gv / (two * yv)).collect());
                }
                Op::Sin(a) => acc(*a, elementwise(val(*a), &|x, gv| gv * x.cos())),
                Op::Cos(a) => acc(*a, elementwise(val(*a), &|x, gv| -gv * x.sin())),
                Op::Abs(a) => acc(
                    *a,
                    elementwise(val(*a), &|x, gv| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Square(a) => acc(*a, elementwise(val(*a), &|x, gv| T::lit(2.0) * x * gv)),
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    acc(*a, vec![g[0] / T::lit(n as f64); n]);
                }
                Op::SumAxis(a, axis) => {
                    let (outer, len, inner) = around_axis(val(*a).shape(), *axis);
                    let mut ga = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        for _ in 0..len {
                            ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let mut ga = vec![T::zero(); y.len()];
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let nf = T::lit(n as f64);
                    let mut ga = vec![T::zero(); y.len()];
                    for (r, ((yr, gr), out)) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let gm = gr.iter().copied().sum::<T>() / nf;
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = inv_std[r] * (gv - gm - yv * gy);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = around_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        offset += len;
                        acc(*p, gp);
                    }
                }
                Op::Slice(a, axis, start) => {
                    let (outer, len, inner) = around_axis(val(*a).shape(), *axis);
                    let width = node.value.shape()[*axis];
                    let mut ga = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        ga[dst..dst + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                    }
                    acc(*a, ga);
                }
            }
        }

        let grads = nodes[..=loss.0]
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.param {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(node.value.shape(), data).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }
}
