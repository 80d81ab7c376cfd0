use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A recorded operation. Input fields are node ids on the same tape.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `scale * x + shift`, elementwise.
    Affine {
        x: usize,
        scale: T,
    },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Atan(usize),
    Sum {
        x: usize,
        axis: Option<usize>,
    },
    Mean {
        x: usize,
        axis: Option<usize>,
    },
    Matmul(usize, usize),
    Gather {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Single-threaded by construction;
/// use one tape per thread.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value on a [`Tape`].
#[derive(Debug)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch holds a single row).
    pub var: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of leaf `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        let shape = &self.shapes[var.id];
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of recorded operations visited by the reverse sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Number of operations recorded so far (leaves excluded).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let values: Vec<_> = parts.iter().map(|p| self.value(p.id)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::dim(format!("concat of {first:?} with {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| self.requires_grad(p.id));
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    fn backward_from(&self, loss: usize) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::contract("tape already consumed by a backward pass"));
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss].value;
        if loss_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !loss_value.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut visits = 0;
        if nodes[loss].requires_grad {
            grads[loss] = Some(vec![T::one()]);
        }
        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            visits += 1;
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contribution: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Strides of `shape` right-aligned against `out`, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 {
            0
        } else {
            s
        };
        s *= shape[i];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast iteration space.
fn for_each_broadcast(
    out: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= a_strides[d] * out[d];
            ib -= b_strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_axis_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![],
        Some(a) => {
            let mut s = shape.to_vec();
            s.remove(a);
            s
        }
    }
}

/// Gradient of a binary broadcast op: `da`/`db` map (a, b, out-grad) to partials.
fn binary_backward<T: Real>(
    nodes: &[Node<T>],
    out_id: usize,
    a: usize,
    b: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    partials: impl Fn(T, T, T) -> (T, T),
) {
    let out_shape = nodes[out_id].value.shape();
    let av = &nodes[a].value;
    let bv = &nodes[b].value;
    let a_strides = aligned_strides(av.shape(), out_shape);
    let b_strides = aligned_strides(bv.shape(), out_shape);
    let mut ga = vec![T::zero(); av.numel()];
    let mut gb = vec![T::zero(); bv.numel()];
    let (ad, bd) = (av.data(), bv.data());
    for_each_broadcast(out_shape, &a_strides, &b_strides, |o, ia, ib| {
        let (pa, pb) = partials(ad[ia], bd[ib], g[o]);
        ga[ia] += pa;
        gb[ib] += pb;
    });
    if nodes[a].requires_grad {
        accumulate(grads, a, ga);
    }
    if nodes[b].requires_grad {
        accumulate(grads, b, gb);
    }
}

fn unary_backward<T: Real>(
    nodes: &[Node<T>],
    x: usize,
    out: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    partial: impl Fn(T, T) -> T,
) {
    if !nodes[x].requires_grad {
        return;
    }
    let xv = nodes[x].value.data();
    let yv = nodes[out].value.data();
    let contribution = xv
        .iter()
        .zip(yv)
        .zip(g)
        .map(|((&xi, &yi), &gi)| gi * partial(xi, yi))
        .collect();
    accumulate(grads, x, contribution);
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    // min(x, 0) - ln(1 + e^{-|x|})
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => binary_backward(nodes, id, *a, *b, g, grads, |_, _, g| (g, g)),
        Op::Sub(a, b) => binary_backward(nodes, id, *a, *b, g, grads, |_, _, g| (g, -g)),
        Op::Mul(a, b) => binary_backward(nodes, id, *a, *b, g, grads, |x, y, g| (g * y, g * x)),
        Op::Div(a, b) => binary_backward(nodes, id, *a, *b, g, grads, |x, y, g| {
            (g / y, -g * x / (y * y))
        }),
        Op::Affine { x, scale } => {
            let s = *scale;
            unary_backward(nodes, *x, id, g, grads, |_, _| s)
        }
        Op::Exp(x) => unary_backward(nodes, *x, id, g, grads, |_, y| y),
        Op::Log(x) => unary_backward(nodes, *x, id, g, grads, |x, _| T::one() / x),
        Op::Sqrt(x) => unary_backward(nodes, *x, id, g, grads, |_, y| {
            // subgradient 0 at the origin
            if y > T::zero() {
                T::lit(0.5) / y
            } else {
                T::zero()
            }
        }),
        Op::Relu(x) => unary_backward(nodes, *x, id, g, grads, |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Sigmoid(x) => unary_backward(nodes, *x, id, g, grads, |_, y| y * (T::one() - y)),
        Op::LogSigmoid(x) => unary_backward(nodes, *x, id, g, grads, |x, _| sigmoid(-x)),
        Op::Atan(x) => unary_backward(nodes, *x, id, g, grads, |x, _| T::one() / (T::one() + x * x)),
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            if !nodes[*x].requires_grad {
                return;
            }
            let shape = nodes[*x].value.shape();
            let n = nodes[*x].value.numel();
            let mean = matches!(nodes[id].op, Op::Mean { .. });
            match axis {
                None => {
                    let scale = if mean { T::lit(1.0 / n as f64) } else { T::one() };
                    accumulate(grads, *x, vec![g[0] * scale; n]);
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(shape, *a);
                    let scale = if mean { T::lit(1.0 / len as f64) } else { T::one() };
                    let mut out = vec![T::zero(); n];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                out[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(grads, *x, out);
                }
            }
        }
        Op::Matmul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![T::zero(); m * k];
                let bd = bv.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let s: f64 = grow.iter().zip(brow).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                        ga[i * k + p] = T::lit(s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0f64; k * n];
                let ad = av.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p].as_f64();
                        if aip == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += aip * gv.as_f64();
                        }
                    }
                }
                accumulate(grads, *b, gb.into_iter().map(T::lit).collect());
            }
        }
        Op::Gather { x, axis, indices } => {
            if !nodes[*x].requires_grad {
                return;
            }
            let shape = nodes[*x].value.shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let mut out = vec![T::zero(); nodes[*x].value.numel()];
            let out_len = indices.len();
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    for i in 0..inner {
                        out[(o * len + src) * inner + i] += g[(o * out_len + j) * inner + i];
                    }
                }
            }
            accumulate(grads, *x, out);
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(nodes[p].value.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += len;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let xv = &nodes[*x].value;
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let gam = nodes[*gamma].value.data();
            let xd = xv.data();
            let xhat = |r: usize, ch: usize| (xd[r * c + ch].as_f64() - mean[ch]) * inv_std[ch];
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for r in 0..n {
                for ch in 0..c {
                    let gv = g[r * c + ch].as_f64();
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xhat(r, ch);
                }
            }
            if nodes[*gamma].requires_grad {
                accumulate(grads, *gamma, sum_gx.iter().map(|&v| T::lit(v)).collect());
            }
            if nodes[*beta].requires_grad {
                accumulate(grads, *beta, sum_g.iter().map(|&v| T::lit(v)).collect());
            }
            if nodes[*x].requires_grad {
                let nf = n as f64;
                let mut gx = vec![T::zero(); n * c];
                for r in 0..n {
                    for ch in 0..c {
                        let gamma_c = gam[ch].as_f64();
                        let dxhat = g[r * c + ch].as_f64() * gamma_c;
                        let v = inv_std[ch] / nf
                            * (nf * dxhat - sum_g[ch] * gamma_c - xhat(r, ch) * sum_gx[ch] * gamma_c);
                        gx[r * c + ch] = T::lit(v);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// A constant copy of this value: gradients stop here.
    pub fn detach(self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let sa = aligned_strides(a.shape(), &shape);
            let sb = aligned_strides(b.shape(), &shape);
            let mut data = vec![T::zero(); shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if other.value().data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(other, Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: T, shift: T) -> Var<'t, T> {
        self.unary(Op::Affine { x: self.id, scale }, |v| scale * v + shift)
    }

    pub fn scale(self, scale: T) -> Var<'t, T> {
        self.affine(scale, T::zero())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let out = self.unary(Op::Exp(self.id), |v| v.exp());
        if !out.value().is_finite() && self.value().is_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(out)
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(v) = self.value().data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(Op::Log(self.id), |v| v.ln()))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if let Some(v) = self.value().data().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        Ok(self.unary(Op::Sqrt(self.id), |v| v.sqrt()))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn log_sigmoid(self) -> Var<'t, T> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn atan(self) -> Var<'t, T> {
        self.unary(Op::Atan(self.id), |v| v.atan())
    }

    fn reduce(self, axis: Option<usize>, mean: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        let out = match axis {
            None => {
                let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
                let s = if mean { s / x.numel() as f64 } else { s };
                Tensor::scalar(T::lit(s))
            }
            Some(a) => {
                if a >= shape.len() {
                    return Err(Error::dim(format!("axis {a} on rank {}", shape.len())));
                }
                let (outer, len, inner) = split_axis(shape, a);
                let mut acc = vec![0f64; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            acc[o * inner + i] += x.data()[(o * len + k) * inner + i].as_f64();
                        }
                    }
                }
                if mean {
                    acc.iter_mut().for_each(|v| *v /= len as f64);
                }
                Tensor::new(
                    reduce_axis_shape(shape, axis),
                    acc.into_iter().map(T::lit).collect(),
                )?
            }
        };
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    pub fn sum(self) -> Var<'t, T> {
        self.reduce(None, false).expect("full reduction")
    }

    pub fn mean(self) -> Var<'t, T> {
        self.reduce(None, true).expect("full reduction")
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(Some(axis), false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(Some(axis), true)
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut data = vec![T::zero(); m * n];
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let aip = ad[i * k + p].as_f64();
                if aip == 0.0 {
                    continue;
                }
                for (v, bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *v += aip * bv.as_f64();
                }
            }
            for (d, v) in data[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *d = T::lit(*v);
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], data)?, Op::Matmul(self.id, other.id), rg))
    }

    /// Selects entries along `axis` by index (repeats allowed). Covers channel
    /// permutation, channel splitting, and row lookup.
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("gather axis {axis} on rank {}", shape.len())));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::dim(format!("gather index {bad} out of range {len}")));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &src in indices {
                let start = (o * len + src) * inner;
                data.extend_from_slice(&x.data()[start..start + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Gather {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Training-mode batch normalization of an `N × C` input with batch
    /// statistics (biased variance in the normalization).
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats)> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim(format!("batch_norm on shape {:?}", x.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if n == 0 {
            return Err(Error::contract("batch_norm on an empty batch"));
        }
        if gamma.value().numel() != c || beta.value().numel() != c {
            return Err(Error::dim("batch_norm affine parameters do not match channels"));
        }
        let xd = x.data();
        let mut mean = vec![0f64; c];
        for r in 0..n {
            for ch in 0..c {
                mean[ch] += xd[r * c + ch].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0f64; c];
        for r in 0..n {
            for ch in 0..c {
                let d = xd[r * c + ch].as_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased = if n > 1 {
            var.iter().map(|v| v / (n - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = gamma.value();
        let b = beta.value();
        let mut data = vec![T::zero(); n * c];
        for r in 0..n {
            for ch in 0..c {
                let xhat = (xd[r * c + ch].as_f64() - mean[ch]) * inv_std[ch];
                data[r * c + ch] = T::lit(xhat * g.data()[ch].as_f64() + b.data()[ch].as_f64());
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.tape.push(
            Tensor::new(vec![n, c], data)?,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: mean.clone(),
                inv_std,
            },
            rg,
        );
        Ok((
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Reverse sweep from this scalar. Consumes the tape.
    pub fn backward(self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_of_ones() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().shape(), &[2, 2]);
        assert!(c.value().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2], 1.0));
        assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.square().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let g = x.log_sigmoid().sum().backward().unwrap();
        assert!((g.wrt(&x).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_and_nan() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));

        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(f64::NAN));
        assert!(matches!(x.square().backward(), Err(Error::Numeric(_))));
    }

    #[test]
    fn tape_is_consumed() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.square();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn visits_match_recorded_ops() {
        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[2, 2], &[0.5, -1.0, 2.0, 0.1]));
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
        let h = x.matmul(w).unwrap().relu().sigmoid();
        let unused = w.exp().unwrap();
        let _ = unused;
        let loss = h.sum_axis(1).unwrap().mean();
        let recorded = tape.recorded_ops();
        let g = loss.backward().unwrap();
        assert_eq!(g.visits(), recorded);
        assert_eq!(recorded, 6);
    }

    #[test]
    fn broadcast_row_bias_gradient_sums_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[2], &[0.0, 0.0]));
        let g = x.add(b).unwrap().sum().backward().unwrap();
        assert_eq!(g.wrt(&b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let left = x.gather(1, &[0]).unwrap();
        let right = x.gather(1, &[1, 2]).unwrap();
        let joined = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(joined.value().data(), x.value().data());
        let perm = x.gather(1, &[2, 0, 1]).unwrap();
        assert_eq!(perm.value().data(), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        let g = joined.square().sum().backward().unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn batch_norm_zero_variance_is_stabilized() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 1], &[2.0, 2.0, 2.0]));
        let gamma = tape.constant(t(&[1], &[1.5]));
        let beta = tape.constant(t(&[1], &[0.25]));
        let (y, stats) = x.batch_norm(gamma, beta, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.var, vec![0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_f64(&[2, 2], &[0.3, -0.7, 1.1, 0.01]).unwrap());
            x.matmul(x).unwrap().sigmoid().log_sigmoid().mean().value().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
