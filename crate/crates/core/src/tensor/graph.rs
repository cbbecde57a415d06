use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm_nn, gemm_nt, gemm_tn, permute,
    reduce_to, split_axis,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

enum Op<T> {
    Leaf,
    Param(ParamId),
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Log(usize, T),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(usize, Option<usize>),
    Mean(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Parameters are bound lazily through [`Graph::param`]; each parameter gets at
/// most one node per graph, so its adjoint is the total derivative.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Vec<Tensor<T>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    params: Vec<Option<Tensor<T>>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a leaf created with `requires_grad = true`.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub(crate) fn param_grads(&self) -> &[Option<Tensor<T>>] {
        &self.params
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph with no parameters attached.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that can bind the parameters of `store`.
    pub fn with_params(store: &ParamStore<T>) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: store.tensors().cloned().collect(),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Const, false)
    }

    pub fn param(&self, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let value = self
            .params
            .get(id.0)
            .unwrap_or_else(|| panic!("parameter {} not attached to this graph", id.0))
            .clone();
        let v = self.push(value, Op::Param(id), true);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![T::one()]);
        let mut grads = Gradients {
            params: vec![None; self.params.len()],
            leaves: HashMap::new(),
        };

        for id in (0..=loss.id).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, g: Vec<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut adj[target] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads
                        .leaves
                        .insert(id, Tensor::from_parts(node.value.shape().to_vec(), dy));
                }
                Op::Param(p) => {
                    grads.params[p.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), dy));
                }
                Op::Const => {}
                &Op::MatMul(a, b) => {
                    let (da, db) = matmul_backward(val(a), val(b), &dy);
                    send(a, da);
                    send(b, db);
                }
                &Op::Add(a, b) => {
                    let out = node.value.shape();
                    send(a, reduce_to(&dy, out, val(a).shape()));
                    send(b, reduce_to(&dy, out, val(b).shape()));
                }
                &Op::Sub(a, b) => {
                    let out = node.value.shape();
                    send(a, reduce_to(&dy, out, val(a).shape()));
                    let neg: Vec<T> = dy.iter().map(|&x| -x).collect();
                    send(b, reduce_to(&neg, out, val(b).shape()));
                }
                &Op::Mul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let out = node.value.shape();
                    let mut ga = vec![T::zero(); ta.numel()];
                    let mut gb = vec![T::zero(); tb.numel()];
                    let (xa, xb) = (ta.data(), tb.data());
                    if ta.shape() == tb.shape() {
                        for i in 0..dy.len() {
                            ga[i] = dy[i] * xb[i];
                            gb[i] = dy[i] * xa[i];
                        }
                    } else {
                        let sa = broadcast_strides(ta.shape(), out);
                        let sb = broadcast_strides(tb.shape(), out);
                        for_each_broadcast(out, &sa, &sb, |i, ia, ib| {
                            ga[ia] += dy[i] * xb[ib];
                            gb[ib] += dy[i] * xa[ia];
                        });
                    }
                    send(a, ga);
                    send(b, gb);
                }
                &Op::Scale(a, s) => send(a, dy.iter().map(|&g| g * s).collect()),
                &Op::AddScalar(a) => send(a, dy),
                &Op::Relu(a) => {
                    let x = val(a).data();
                    let g = dy
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    send(a, g);
                }
                &Op::Log(a, floor) => {
                    let x = val(a).data();
                    let g = dy
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > floor { g / x } else { T::zero() })
                        .collect();
                    send(a, g);
                }
                &Op::Softmax(a, axis) => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), axis);
                    let mut g = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot += dy[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                g[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                    send(a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    axis,
                    xhat,
                    rstd,
                } => {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let gv = val(*gain).data();
                    let mut dx = vec![T::zero(); dy.len()];
                    let mut dg = vec![T::zero(); len];
                    let mut db = vec![T::zero(); len];
                    let n = T::c(len as f64);
                    for o in 0..outer {
                        for i in 0..inner {
                            let slice = o * inner + i;
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..len {
                                let d = dy[at(j)] * gv[j];
                                m1 += d;
                                m2 += d * xhat[at(j)];
                                dg[j] += dy[at(j)] * xhat[at(j)];
                                db[j] += dy[at(j)];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for j in 0..len {
                                let d = dy[at(j)] * gv[j];
                                dx[at(j)] = rstd[slice] * (d - m1 - xhat[at(j)] * m2);
                            }
                        }
                    }
                    send(*x, dx);
                    send(*gain, dg);
                    send(*bias, db);
                }
                &Op::Sum(a, axis) => {
                    let shape = val(a).shape();
                    let g = match axis {
                        None => vec![dy[0]; val(a).numel()],
                        Some(axis) => spread_axis(&dy, shape, axis, T::one()),
                    };
                    send(a, g);
                }
                &Op::Mean(a, axis) => {
                    let shape = val(a).shape();
                    let s = T::one() / T::c(shape[axis] as f64);
                    send(a, spread_axis(&dy, shape, axis, s));
                }
                Op::Concat(parts, axis) => {
                    let out = node.value.shape();
                    let (outer, total, inner) = split_axis(out, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            g.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        send(p, g);
                        offset += len;
                    }
                }
                &Op::Narrow { src, axis, start } => {
                    let shape = val(src).shape();
                    let (outer, total, inner) = split_axis(shape, axis);
                    let len = node.value.shape()[axis];
                    let mut g = vec![T::zero(); val(src).numel()];
                    for o in 0..outer {
                        let dst = o * total * inner + start * inner;
                        let from = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&dy[from..from + len * inner]);
                    }
                    send(src, g);
                }
                &Op::Reshape(a) => send(a, dy),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*a, permute(&dy, node.value.shape(), &inv));
                }
            }
        }
        Ok(grads)
    }
}

fn spread_axis<T: Real>(dy: &[T], shape: &[usize], axis: usize, scale: T) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut g = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                g[o * len * inner + j * inner + i] = dy[o * inner + i] * scale;
            }
        }
    }
    g
}

struct MatMulPlan {
    lead: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let lead = broadcast_shape(la, lb).ok_or_else(|| Error::dim("matmul", a, b))?;
    Ok(MatMulPlan {
        sa: broadcast_strides(la, &lead),
        sb: broadcast_strides(lb, &lead),
        lead,
        m,
        k,
        n,
    })
}

fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut shape = p.lead.clone();
    shape.extend([m, n]);
    let batches: usize = p.lead.iter().product();
    let mut out = vec![T::zero(); batches * m * n];
    if b.rank() == 2 {
        let rows = a.numel() / k;
        if rows * n == out.len() {
            gemm_nn(a.data(), b.data(), &mut out, rows, k, n);
            return Ok(Tensor::from_parts(shape, out));
        }
    }
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&p.lead, &p.sa, &p.sb, |bi, ia, ib| {
        gemm_nn(
            &ad[ia * m * k..(ia + 1) * m * k],
            &bd[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    });
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, dy: &[T]) -> (Vec<T>, Vec<T>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    if b.rank() == 2 && (a.numel() / k) * n == dy.len() {
        let rows = a.numel() / k;
        gemm_nt(dy, bd, &mut da, rows, n, k);
        gemm_tn(ad, dy, &mut db, rows, k, n);
        return (da, db);
    }
    for_each_broadcast(&p.lead, &p.sa, &p.sb, |bi, ia, ib| {
        let g = &dy[bi * m * n..(bi + 1) * m * n];
        gemm_nt(g, &bd[ib * k * n..(ib + 1) * k * n], &mut da[ia * m * k..(ia + 1) * m * k], m, n, k);
        gemm_tn(&ad[ia * m * k..(ia + 1) * m * k], g, &mut db[ib * k * n..(ib + 1) * k * n], m, k, n);
    });
    (da, db)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, shape, &[axis]));
    }
    Ok(())
}

fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(op, a.shape(), b.shape()))?;
    let (xa, xb) = (a.data(), b.data());
    let numel: usize = out.iter().product();
    let mut data = Vec::with_capacity(numel);
    if out == a.shape() && out.ends_with(b.shape()) {
        let nb = xb.len();
        data.extend(xa.iter().enumerate().map(|(i, &x)| f(x, xb[i % nb])));
    } else {
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        for_each_broadcast(&out, &sa, &sb, |_, ia, ib| data.push(f(xa[ia], xb[ib])));
    }
    Ok(Tensor::from_parts(out, data))
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn pair(self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    /// Batched matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = matmul_forward(&self.value(), &other.value())?;
        Ok(self.pair(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = binary("add", &self.value(), &other.value(), |x, y| x + y)?;
        Ok(self.pair(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = binary("sub", &self.value(), &other.value(), |x, y| x - y)?;
        Ok(self.pair(other, v, Op::Sub(self.id, other.id)))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let v = binary("mul", &self.value(), &other.value(), |x, y| x * y)?;
        Ok(self.pair(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::c(s);
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'g, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    /// Natural log of `max(x, floor)`; zero gradient where clamped.
    pub fn log_clamped(self, floor: f64) -> Var<'g, T> {
        let floor = T::c(floor);
        let v = self.value().map(|x| x.max(floor).ln());
        self.unary(v, Op::Log(self.id, floor))
    }

    /// Max-stabilized softmax. `-inf` entries map to exactly zero; a slice
    /// that is entirely `-inf` is a [`Error::Masking`]. NaN inputs propagate.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                let mut nan = false;
                for j in 0..len {
                    max = max.max(xd[at(j)]);
                    nan |= xd[at(j)].is_nan();
                }
                if nan {
                    for j in 0..len {
                        y[at(j)] = T::nan();
                    }
                    continue;
                }
                if max == T::neg_infinity() {
                    return Err(Error::Masking { slice: o * inner + i });
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    /// Normalizes slices along `axis` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped `[extent]`).
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, axis: usize, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("layer_norm", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len < 2 {
            return Err(Error::contract("layer_norm axis extent must be at least 2"));
        }
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [len] || b.shape() != [len] {
            return Err(Error::dim("layer_norm", x.shape(), g.shape()));
        }
        let (gd, bd, xd) = (g.data(), b.data(), x.data());
        let n = T::c(len as f64);
        let eps = T::c(eps);
        let mut y = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean += xd[at(j)];
                }
                mean = mean / n;
                let mut var = T::zero();
                for j in 0..len {
                    let d = xd[at(j)] - mean;
                    var += d * d;
                }
                var = var / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    let h = (xd[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    y[at(j)] = h * gd[j] + bd[j];
                }
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), y);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id, None))
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let v = reduce_axis(&self.value(), axis, "sum_axis", false)?;
        Ok(self.unary(v, Op::Sum(self.id, Some(axis))))
    }

    /// Mean along `axis`, removing it.
    pub fn mean(self, axis: usize) -> Result<Var<'g, T>> {
        let v = reduce_axis(&self.value(), axis, "mean", true)?;
        Ok(self.unary(v, Op::Mean(self.id, axis)))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let graph = first.graph;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        check_axis("concat", base, axis)?;
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", base, s));
            }
            total += s[axis];
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(graph.push(Tensor::from_parts(shape, data), Op::Concat(ids, axis), rg))
    }

    /// Entries `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::dim("narrow", x.shape(), &[axis, start, len]));
        }
        let (outer, total, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * total * inner + start * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", x.shape(), perm));
        }
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        let data = permute(x.data(), x.shape(), perm);
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Same value, but treated as a constant by [`Graph::backward`].
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }
}

fn reduce_axis<T: Real>(x: &Tensor<T>, axis: usize, op: &'static str, mean: bool) -> Result<Tensor<T>> {
    check_axis(op, x.shape(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += xd[o * len * inner + j * inner + i];
            }
        }
    }
    if mean {
        let n = T::c(len as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match a.matmul(b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {:?}", other.map(|v| v.shape())),
        }
    }

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]), true);
        let b = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = a.matmul(b).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        // ones(2×2) · Bᵀ: every row equals the row sums of B.
        assert_eq!(grads.wrt(a).unwrap().data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([3, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::eye(2).reshape([1, 2, 2]).unwrap());
        let y = a.matmul(b).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 2]);
        assert_eq!(y.value(), a.value());
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let y = g.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap().value();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g
            .constant(t(&[2], &[f64::NEG_INFINITY, 0.0]))
            .softmax(0)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.0, 1.0]);
        let y = g
            .constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]))
            .softmax(0)
            .unwrap()
            .value();
        for (p, e) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_softmax_slice_is_an_error() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(matches!(x.softmax(1), Err(Error::Masking { slice: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let gain = g.constant(Tensor::ones([2]));
        let bias = g.constant(Tensor::zeros([2]));
        let y = g
            .constant(t(&[2], &[1.0, 3.0]))
            .layer_norm(gain, bias, 0, 1e-5)
            .unwrap()
            .value();
        // std = sqrt(1 + 1e-5)
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + e).abs() < 1e-12 && (y.data()[1] - e).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-5);

        let gain = g.constant(Tensor::ones([3]));
        let bias = g.constant(Tensor::zeros([3]));
        let y = g
            .constant(t(&[3], &[2.0, 2.0, 2.0]))
            .layer_norm(gain, bias, 0, 1e-5)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::<f64>::new();
        let r = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).relu().value();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let m = g.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0])).mean(1).unwrap().value();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2.0, 6.0]);
        let a = g.constant(t(&[1, 1], &[1.0]));
        let b = g.constant(t(&[1, 1], &[2.0]));
        let c = Var::concat(&[a, b], 1).unwrap().value();
        assert_eq!(c.shape(), &[1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0]);
        let m2 = g.constant(Tensor::zeros([2, 2]));
        assert!(m2.add(g.constant(Tensor::zeros([3]))).is_err());
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let grads = g.backward(x.relu().sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.3, -1.0, 4.0]), true);
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let grads = g.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = x.mul(x.detach()).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2, 3]), true);
        let b = g.leaf(Tensor::zeros([3]), true);
        let grads = g.backward(x.add(b).unwrap().sum()).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
    }
}
