//! Forward kernels shared by [`Tensor`] methods and tape operations.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the linear index of the broadcast
/// source element in `src_shape`.
pub(crate) fn broadcast_index(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let m: usize = src_shape.iter().product();
    if out_shape == src_shape {
        return (0..n).collect();
    }
    let r = out_shape.len();
    let off = r - src_shape.len();
    if src_shape.iter().all(|&d| d != 1 || m == 1) && out_shape[off..] == *src_shape {
        return (0..n).map(|i| i % m.max(1)).collect();
    }
    // generic path: strides of the source mapped to output axes, 0 on broadcast axes
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..src_shape.len()).rev() {
        if src_shape[i] != 1 {
            strides[off + i] = s;
        }
        s *= src_shape[i];
    }
    let mut idx = vec![0usize; r];
    let mut out = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let Some(shape) = broadcast_shape(&a.shape, &b.shape) else {
        return shape_err("broadcast", &a.shape, &b.shape);
    };
    let ia = broadcast_index(&shape, &a.shape);
    let ib = broadcast_index(&shape, &b.shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor { shape, data })
}

/// Sum `grad` (shaped like the broadcast output) back onto `src_shape`.
pub(crate) fn reduce_to(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    if grad.shape == src_shape {
        return grad.clone();
    }
    let idx = broadcast_index(&grad.shape, src_shape);
    let mut out = Tensor::zeros(src_shape);
    for (g, &i) in grad.data.iter().zip(&idx) {
        out.data[i] += g;
    }
    out
}

/// `c[m,n] (+)= a[m,k] * b[k,n]` on raw strided buffers, `c` dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    gemm_strided(m, k, n, a, sa, b, sb, c, (n as isize, 1), accumulate)
}

/// Fully strided `c (+)= a * b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: isize, cs: isize, r: usize, cc: usize| {
        (r.saturating_sub(1)) as isize * rs + (cc.saturating_sub(1)) as isize * cs
    };
    assert!(last(rsc, csc, m, n) < c.len() as isize);
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    assert!(last(rsa, csa, m, k) < a.len() as isize);
    assert!(last(rsb, csb, k, n) < b.len() as isize);
    // SAFETY: the asserts above bound every strided index inside the slices
    // (all strides are non-negative).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch offset, b batch offset) per output batch
    pub batches: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err("matmul", a, b);
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return shape_err("matmul", a, b);
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let Some(batch) = broadcast_shape(ba, bb) else {
        return shape_err("matmul", a, b);
    };
    let ia = broadcast_index(&batch, ba);
    let ib = broadcast_index(&batch, bb);
    let batches = ia
        .into_iter()
        .zip(ib)
        .map(|(i, j)| (i * m * k, j * k * n))
        .collect();
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        batches,
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = Tensor::zeros(&plan.out_shape);
    // a single 2-D right operand folds the whole batch into one product
    if b.rank() == 2 && a.rank() >= 2 {
        let rows = a.numel() / k.max(1);
        if k > 0 {
            gemm(rows, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), &mut out.data, false);
        }
        return Ok(out);
    }
    for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
        gemm(
            m,
            k,
            n,
            &a.data[oa..],
            (k as isize, 1),
            &b.data[ob..],
            (n as isize, 1),
            &mut out.data[bi * m * n..],
            false,
        );
    }
    Ok(out)
}

pub(crate) fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    if d == 0 {
        return out;
    }
    for row in out.data.chunks_mut(d) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Returns `(y, x_hat, inv_std_per_row)`.
pub(crate) fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = x.last_dim();
    if gain.numel() != d || bias.numel() != d {
        return shape_err("layer_norm", &x.shape, &gain.shape);
    }
    let rows = x.numel() / d.max(1);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat.data[r * d + j] = h;
            y.data[r * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok((y, xhat, inv))
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Contract(format!(
            "invalid permutation {axes:?} for rank {r}"
        )));
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        data.push(x.data[cur]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() || start > end || end > x.shape[axis] {
        return Err(Error::Contract(format!(
            "slice {start}..{end} on axis {axis} of {:?}",
            x.shape
        )));
    }
    let (outer, inner) = outer_inner(&x.shape, axis);
    let len = x.shape[axis];
    let w = end - start;
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = w;
    Ok(Tensor { shape, data })
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Contract(format!(
            "concat axis {axis} on rank {}",
            first.rank()
        )));
    }
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return shape_err("concat", &first.shape, &p.shape);
        }
    }
    let (outer, inner) = outer_inner(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Interpolation taps for one output coordinate: (low index, high index, high weight).
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Half-pixel bilinear resize of the last two axes.
pub(crate) fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || x.shape[r - 2] == 0 || x.shape[r - 1] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!(
            "bilinear resize of {:?} to {out_h}x{out_w}",
            x.shape
        )));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let planes = x.numel() / (h * w);
    let mut shape = x.shape.clone();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn bilinear_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (oh, ow) = (grad.shape[r - 2], grad.shape[r - 1]);
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = Tensor::zeros(in_shape);
    let planes = out.numel() / (h * w);
    for p in 0..planes {
        let g = &grad.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        let mut i = 0;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = g[i];
                i += 1;
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Non-overlapping `k×k` mean pooling of the last two axes.
pub(crate) fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || k == 0 || x.shape[r - 2] % k != 0 || x.shape[r - 1] % k != 0 {
        return Err(Error::Config(format!(
            "average pool of {:?} with window {k}",
            x.shape
        )));
    }
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (oh, ow) = (h / k, w / k);
    let planes = x.numel() / (h * w);
    let norm = 1.0 / (k * k) as f64;
    let mut shape = x.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let mut out = Tensor::zeros(&shape);
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out.data[p * oh * ow + (y / k) * ow + xx / k] += x.data[p * h * w + y * w + xx] * norm;
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool_backward(grad: &Tensor, in_shape: &[usize], k: usize) -> Tensor {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(in_shape);
    let planes = out.numel() / (h * w);
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out.data[p * h * w + y * w + xx] = grad.data[p * oh * ow + (y / k) * ow + xx / k] * norm;
            }
        }
    }
    out
}
