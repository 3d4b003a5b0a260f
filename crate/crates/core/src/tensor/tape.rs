//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in execution order, so the node list is always
//! topologically sorted. Nodes whose inputs are all constants are stored
//! without a backward closure.

use std::cell::{Cell, Ref, RefCell};

use super::kernels::{self, gemm, gemm_strided, reduce_to};
use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{shape_err, Error, Result};

/// Gradient of one recorded operation: receives the upstream gradient, the
/// op's own output, its inputs, and which inputs need a gradient.
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn get_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
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

    /// Drop all recorded nodes and allow a new backward pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(
        &self,
        value: Tensor,
        parents: &[usize],
        backward: impl Fn(&Tensor, &Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagate d(loss)/d(node) to every node reachable from `loss`.
    ///
    /// A tape supports one backward pass; call [`Tape::reset`] before
    /// recording a new graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pg = back(&g, &node.value, &inputs, &needs);
            for ((&p, contrib), &need) in node.parents.iter().zip(pg).zip(&needs) {
                let (Some(c), true) = (contrib, need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.data.iter_mut().zip(&c.data).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        for (i, n) in nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "operands recorded on different tapes"
    );
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow the forward value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value_ref().map(f);
        self.tape.record(out, &[self.id], move |g, y, xs, _| {
            let x = xs[0];
            let data = g
                .data
                .iter()
                .zip(&x.data)
                .zip(&y.data)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor {
                shape: x.shape.clone(),
                data,
            })]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(kernels::gelu_scalar, |x, _| kernels::gelu_grad_scalar(x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `ln(sigmoid(x))`, finite for all finite inputs.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(kernels::log_sigmoid_scalar, |x, _| kernels::sigmoid_scalar(-x))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor, &Tensor, &[bool]) -> [Option<Tensor>; 2] + 'static,
    ) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            kernels::broadcast_binary(&a, &b, f)?
        };
        Ok(self.tape.record(out, &[self.id, other.id], move |g, y, xs, needs| {
            back(g, y, xs[0], xs[1], needs).into_iter().collect()
        }))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, |g, _, a, b, n| {
            [
                n[0].then(|| reduce_to(g, a.shape())),
                n[1].then(|| reduce_to(g, b.shape())),
            ]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, |g, _, a, b, n| {
            [
                n[0].then(|| reduce_to(g, a.shape())),
                n[1].then(|| reduce_to(&g.map(|v| -v), b.shape())),
            ]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, |g, _, a, b, n| {
            [
                n[0].then(|| reduce_to(&g.zip_with(b, |g, b| g * b).unwrap(), a.shape())),
                n[1].then(|| reduce_to(&g.zip_with(a, |g, a| g * a).unwrap(), b.shape())),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a / b, |g, y, a, b, n| {
            [
                n[0].then(|| reduce_to(&g.zip_with(b, |g, b| g / b).unwrap(), a.shape())),
                n[1].then(|| {
                    let gy = g.zip_with(y, |g, y| -g * y).unwrap();
                    reduce_to(&gy.zip_with(b, |v, b| v / b).unwrap(), b.shape())
                }),
            ]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let out = kernels::matmul(&self.value_ref(), &other.value_ref())?;
        Ok(self.tape.record(out, &[self.id, other.id], |g, _, xs, needs| {
            let (a, b) = (xs[0], xs[1]);
            let plan = kernels::matmul_plan(a.shape(), b.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut da = needs[0].then(|| Tensor::zeros(a.shape()));
            let mut db = needs[1].then(|| Tensor::zeros(b.shape()));
            if b.rank() == 2 {
                let rows = a.numel() / k.max(1);
                if let Some(da) = da.as_mut() {
                    gemm(rows, n, k, &g.data, (n as isize, 1), &b.data, (1, n as isize), &mut da.data, false);
                }
                if let Some(db) = db.as_mut() {
                    gemm(k, rows, n, &a.data, (1, k as isize), &g.data, (n as isize, 1), &mut db.data, false);
                }
                return vec![da, db];
            }
            for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
                let gs = &g.data[bi * m * n..];
                if let Some(da) = da.as_mut() {
                    gemm(m, n, k, gs, (n as isize, 1), &b.data[ob..], (1, n as isize), &mut da.data[oa..], true);
                }
                if let Some(db) = db.as_mut() {
                    gemm(k, m, n, &a.data[oa..], (1, k as isize), gs, (n as isize, 1), &mut db.data[ob..], true);
                }
            }
            vec![da, db]
        }))
    }

    pub fn softmax(self) -> Var<'t> {
        let out = kernels::softmax_lastdim(&self.value_ref());
        self.tape.record(out, &[self.id], |g, y, _, _| {
            let d = y.last_dim();
            let mut dx = y.clone();
            for ((dxr, yr), gr) in dx.data.chunks_mut(d).zip(y.data.chunks(d)).zip(g.data.chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer norm over the last axis with affine gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &gain);
        let (out, xhat, inv) = kernels::layer_norm(
            &self.value_ref(),
            &gain.value_ref(),
            &bias.value_ref(),
            LAYER_NORM_EPS,
        )?;
        Ok(self.tape.record(out, &[self.id, gain.id, bias.id], move |g, _, xs, needs| {
            let gain = xs[1];
            let d = gain.numel();
            let mut dx = Tensor::zeros(xs[0].shape());
            let mut dgain = Tensor::zeros(gain.shape());
            let mut dbias = Tensor::zeros(gain.shape());
            for (r, &is) in inv.iter().enumerate() {
                let gr = &g.data[r * d..(r + 1) * d];
                let hr = &xhat.data[r * d..(r + 1) * d];
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    let dh = gr[j] * gain.data[j];
                    s1 += dh;
                    s2 += dh * hr[j];
                    dgain.data[j] += gr[j] * hr[j];
                    dbias.data[j] += gr[j];
                }
                let dxr = &mut dx.data[r * d..(r + 1) * d];
                for j in 0..d {
                    let dh = gr[j] * gain.data[j];
                    dxr[j] = is * (dh - s1 / d as f64 - hr[j] * s2 / d as f64);
                }
            }
            vec![
                needs[0].then_some(dx),
                needs[1].then_some(dgain),
                needs[2].then_some(dbias),
            ]
        }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value_ref().sum());
        self.tape.record(out, &[self.id], |g, _, xs, _| {
            vec![Some(Tensor::full(xs[0].shape(), g.data[0]))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value_ref().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis (which is removed).
    pub fn sum_lastdim(self) -> Var<'t> {
        let out = {
            let x = self.value_ref();
            let d = x.last_dim();
            let mut shape = x.shape().to_vec();
            shape.pop();
            let data = if d == 0 {
                vec![0.0; shape.iter().product()]
            } else {
                x.data.chunks(d).map(|r| r.iter().sum()).collect()
            };
            Tensor { shape, data }
        };
        self.tape.record(out, &[self.id], |g, _, xs, _| {
            let d = xs[0].last_dim();
            let data = g.data.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
            vec![Some(Tensor {
                shape: xs[0].shape.clone(),
                data,
            })]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value_ref().reshape(shape)?;
        Ok(self.tape.record(out, &[self.id], |g, _, xs, _| {
            vec![Some(Tensor {
                shape: xs[0].shape.clone(),
                data: g.data.clone(),
            })]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = kernels::permute(&self.value_ref(), axes)?;
        let inv = kernels::inverse_permutation(axes);
        Ok(self.tape.record(out, &[self.id], move |g, _, _, _| {
            vec![Some(kernels::permute(g, &inv).expect("inverse permutation"))]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.value_ref().rank();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let out = kernels::slice(&self.value_ref(), axis, start, end)?;
        Ok(self.tape.record(out, &[self.id], move |g, _, xs, _| {
            let shape = xs[0].shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[axis];
            let w = end - start;
            let mut dx = Tensor::zeros(shape);
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                dx.data[dst..dst + w * inner].copy_from_slice(&g.data[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Gather entries along axis 0.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value_ref();
            if x.rank() == 0 {
                return Err(Error::Contract("index_select on a scalar".into()));
            }
            let n = x.shape()[0];
            let inner = x.numel() / n.max(1);
            if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
                return Err(Error::Input(format!("index {bad} out of range for {n} rows")));
            }
            let mut shape = x.shape().to_vec();
            shape[0] = indices.len();
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                data.extend_from_slice(&x.data[i * inner..(i + 1) * inner]);
            }
            Tensor { shape, data }
        };
        let indices = indices.to_vec();
        Ok(self.tape.record(out, &[self.id], move |g, _, xs, _| {
            let inner = xs[0].numel() / xs[0].shape()[0].max(1);
            let mut dx = Tensor::zeros(xs[0].shape());
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    dx.data[i * inner + j] += g.data[k * inner + j];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Half-pixel bilinear resize of the last two axes.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let out = kernels::bilinear(&self.value_ref(), out_h, out_w)?;
        Ok(self.tape.record(out, &[self.id], |g, _, xs, _| {
            vec![Some(kernels::bilinear_backward(g, xs[0].shape()))]
        }))
    }

    /// Non-overlapping `k×k` mean pooling of the last two axes.
    pub fn avg_pool(self, k: usize) -> Result<Var<'t>> {
        let out = kernels::avg_pool(&self.value_ref(), k)?;
        Ok(self.tape.record(out, &[self.id], move |g, _, xs, _| {
            vec![Some(kernels::avg_pool_backward(g, xs[0].shape(), k))]
        }))
    }
}

/// Concatenate along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let out = {
        let refs: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value_ref()).collect();
        let views: Vec<&Tensor> = refs.iter().map(|r| &**r).collect();
        kernels::concat(&views, axis)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.record(out, &ids, move |g, _, xs, needs| {
        let shape = g.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let mut offset = 0;
        xs.iter()
            .zip(needs)
            .map(|(x, &need)| {
                let w = x.shape()[axis];
                let start = offset;
                offset += w;
                need.then(|| {
                    let mut dx = Tensor::zeros(x.shape());
                    for o in 0..outer {
                        let src = o * total * inner + start * inner;
                        dx.data[o * w * inner..(o + 1) * w * inner]
                            .copy_from_slice(&g.data[src..src + w * inner]);
                    }
                    dx
                })
            })
            .collect()
    }))
}

/// Scaled dot-product attention split across `heads` channel groups.
///
/// `q: [.., n_q, d]`, `k, v: [.., n_k, d]` with identical leading axes.
/// Each head attends with `softmax(q_h k_hᵀ / sqrt(d / heads)) v_h`; head
/// outputs are written back into their channel group.
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    same_tape(&q, &k);
    same_tape(&q, &v);
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let r = qs.len();
    if r < 2 || ks.len() != r || vs != ks || qs[..r - 2] != ks[..r - 2] || qs[r - 1] != ks[r - 1] {
        return shape_err("attention", &qs, &ks);
    }
    let d = qs[r - 1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} channels not divisible into {heads} heads")));
    }
    let (nq, nk) = (qs[r - 2], ks[r - 2]);
    if nk == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batch: usize = qs[..r - 2].iter().product();
    let ds = d as isize;
    // probabilities, laid out [batch, head, n_q, n_k]
    let mut probs = vec![0.0; batch * heads * nq * nk];
    let mut out = Tensor::zeros(&qs);
    {
        let (qv, kv, vv) = (q.value_ref(), k.value_ref(), v.value_ref());
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * nq * d + h * dh;
                let ko = b * nk * d + h * dh;
                let p = &mut probs[(b * heads + h) * nq * nk..][..nq * nk];
                gemm(nq, dh, nk, &qv.data[qo..], (ds, 1), &kv.data[ko..], (1, ds), p, false);
                for row in p.chunks_mut(nk) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut s = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        s += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= s);
                }
                gemm_strided(nq, nk, dh, p, (nk as isize, 1), &vv.data[ko..], (ds, 1), &mut out.data[qo..], (ds, 1), false);
            }
        }
    }
    let tape = q.tape;
    Ok(tape.record(out, &[q.id, k.id, v.id], move |g, _, xs, needs| {
        let (qv, kv, vv) = (xs[0], xs[1], xs[2]);
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut ds_buf = vec![0.0; nq * nk];
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * nq * d + h * dh;
                let ko = b * nk * d + h * dh;
                let p = &probs[(b * heads + h) * nq * nk..][..nq * nk];
                if needs[2] {
                    // dV_h += Pᵀ dO_h
                    gemm_strided(nk, nq, dh, p, (1, nk as isize), &g.data[qo..], (ds, 1), &mut dv.data[ko..], (ds, 1), true);
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                // dP = dO_h V_hᵀ
                gemm(nq, dh, nk, &g.data[qo..], (ds, 1), &vv.data[ko..], (1, ds), &mut ds_buf, false);
                for (dr, pr) in ds_buf.chunks_mut(nk).zip(p.chunks(nk)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..nk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if needs[0] {
                    gemm_strided(nq, nk, dh, &ds_buf, (nk as isize, 1), &kv.data[ko..], (ds, 1), &mut dq.data[qo..], (ds, 1), true);
                }
                if needs[1] {
                    gemm_strided(nk, nq, dh, &ds_buf, (1, nk as isize), &qv.data[qo..], (ds, 1), &mut dk.data[ko..], (ds, 1), true);
                }
            }
        }
        vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dv),
        ]
    }))
}
