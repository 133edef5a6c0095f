// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric kernels behind the tape primitives.

use crate::autodiff::tape::Broadcast;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub(crate) fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    if nb == 1 || (b.len() < a.len() && a.ends_with(b)) {
        return Ok((a.to_vec(), Broadcast::Right(nb)));
    }
    if na == 1 || (a.len() < b.len() && b.ends_with(a)) {
        return Ok((b.to_vec(), Broadcast::Left(na)));
    }
    Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
}

pub(crate) fn zip_broadcast(a: &[f64], b: &[f64], bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Right(n) => a.iter().enumerate().map(|(i, &x)| f(x, b[i % n])).collect(),
        Broadcast::Left(n) => b.iter().enumerate().map(|(i, &y)| f(a[i % n], y)).collect(),
    }
}

/// Gradients of a broadcasting binary op. `partials(a_i, b_i)` returns
/// `(∂out/∂a, ∂out/∂b)` at one output element.
pub(crate) fn binary_grads(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    bc: Broadcast,
    partials: impl Fn(f64, f64) -> (f64, f64),
) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ia, ib): (fn(usize, usize) -> usize, fn(usize, usize) -> usize) = match bc {
        Broadcast::Same => (|i, _| i, |i, _| i),
        Broadcast::Right(_) => (|i, _| i, |i, n| i % n),
        Broadcast::Left(_) => (|i, n| i % n, |i, _| i),
    };
    let (na, nb) = (a.numel(), b.numel());
    for (i, &gi) in g.data().iter().enumerate() {
        let (ka, kb) = (ia(i, na), ib(i, nb));
        let (da, db) = partials(a.data()[ka], b.data()[kb]);
        ga[ka] += gi * da;
        gb[kb] += gi * db;
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    if a.rank() == 0 || b.rank() == 0 || b.rank() > 2 {
        return Err(Error::shape(
            "matmul",
            format!("unsupported ranks {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let k = a.last_dim();
    if b.shape()[0] != k {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let m = if b.rank() == 2 { b.shape()[1] } else { 1 };
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    if b.rank() == 2 {
        shape.push(m);
    }
    Ok((a.numel() / k, k, m, shape))
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, k, m, shape) = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        let arow = &ad[r * k..(r + 1) * k];
        let orow = &mut out[r * m..(r + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (rows, k, m, _) = matmul_dims(a, b).expect("validated in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for r in 0..rows {
        let grow = &gd[r * m..(r + 1) * m];
        for kk in 0..k {
            let brow = &bd[kk * m..(kk + 1) * m];
            ga[r * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[r * k + kk];
            for (o, &gv) in gb[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

pub(crate) fn reduce_last(x: &Tensor, op: &'static str, factor: f64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape(op, "cannot reduce a rank-0 tensor"));
    }
    let d = x.last_dim();
    let data = x
        .data()
        .chunks(d.max(1))
        .map(|row| row.iter().sum::<f64>() * factor)
        .collect();
    Tensor::new(x.shape()[..x.rank() - 1].to_vec(), data)
}

pub(crate) fn spread_last(g: &Tensor, shape: &[usize], factor: f64) -> Tensor {
    let d = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| g.data()[i / d] * factor).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

pub(crate) fn slice_backward(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        let base = o * n * inner + start * inner;
        out.data_mut()[base..base + len * inner].copy_from_slice(src);
    }
    out
}

pub(crate) fn concat_forward(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} for {:?}", first.shape())));
    }
    for x in xs {
        let same = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

pub(crate) fn expand_forward(x: &Tensor, axis: usize, size: usize) -> Result<Tensor> {
    if axis > x.rank() {
        return Err(Error::shape("expand", format!("axis {axis} for {:?}", x.shape())));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * size * inner);
    for o in 0..outer {
        let src = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..size {
            data.extend_from_slice(src);
        }
    }
    let mut shape = x.shape().to_vec();
    shape.insert(axis, size);
    Tensor::new(shape, data)
}

pub(crate) fn expand_backward(g: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis..].iter().product();
    let size = g.shape()[axis];
    let mut out = Tensor::zeros(shape);
    for o in 0..outer {
        for s in 0..size {
            let src = &g.data()[(o * size + s) * inner..(o * size + s + 1) * inner];
            for (d, v) in out.data_mut()[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    out
}

/// (batch, L, E, W) for a causal conv, validating shapes.
fn conv_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() < 2 || w.rank() != 2 {
        return Err(Error::shape(
            "causal_conv",
            format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
        ));
    }
    let (l, e) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    if w.shape()[0] != e || w.shape()[1] == 0 {
        return Err(Error::shape(
            "causal_conv",
            format!("kernel {:?} does not match {e} channels", w.shape()),
        ));
    }
    Ok((x.numel() / (l * e).max(1), l, e, w.shape()[1]))
}

pub(crate) fn causal_conv_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (batch, l, e, width) = conv_dims(x, w)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; x.numel()];
    for p in 0..batch {
        let base = p * l * e;
        for t in 0..l {
            for k in 0..width {
                let Some(s) = (t + k + 1).checked_sub(width) else { continue };
                for ch in 0..e {
                    out[base + t * e + ch] += wd[ch * width + k] * xd[base + s * e + ch];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn causal_conv_backward(g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
    let (batch, l, e, width) = conv_dims(x, w).expect("validated in forward");
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    for p in 0..batch {
        let base = p * l * e;
        for t in 0..l {
            for k in 0..width {
                let Some(s) = (t + k + 1).checked_sub(width) else { continue };
                for ch in 0..e {
                    let go = gd[base + t * e + ch];
                    gx[base + s * e + ch] += go * wd[ch * width + k];
                    gw[ch * width + k] += go * xd[base + s * e + ch];
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

/// Validated scan dimensions `(batch, L, E, N)`.
pub(crate) fn scan_dims(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let fail = || {
        Error::shape(
            "selective_scan",
            format!(
                "a_bar {:?}, b_bar {:?}, c {:?}, x {:?}",
                a_bar.shape(),
                b_bar.shape(),
                c.shape(),
                x.shape()
            ),
        )
    };
    if x.rank() < 2 || a_bar.rank() != x.rank() + 1 {
        return Err(fail());
    }
    let n = a_bar.last_dim();
    let mut expect_ab = x.shape().to_vec();
    expect_ab.push(n);
    let mut expect_c = x.shape()[..x.rank() - 1].to_vec();
    expect_c.push(n);
    if a_bar.shape() != expect_ab.as_slice() || b_bar.shape() != expect_ab.as_slice() || c.shape() != expect_c.as_slice() {
        return Err(fail());
    }
    let (l, e) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    Ok((x.numel() / (l * e).max(1), l, e, n))
}

pub(crate) fn scan_forward(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (batch, l, e, n) = scan_dims(a_bar, b_bar, c, x)?;
    let (ad, bd, cd, xd) = (a_bar.data(), b_bar.data(), c.data(), x.data());
    let mut y = vec![0.0; x.numel()];
    let mut states = vec![0.0; a_bar.numel()];
    let mut h = vec![0.0; e * n];
    for p in 0..batch {
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..l {
            let row = (p * l + t) * e;
            let ctn = &cd[(p * l + t) * n..(p * l + t + 1) * n];
            for ch in 0..e {
                let xv = xd[row + ch];
                let mut acc = 0.0;
                for k in 0..n {
                    let idx = (row + ch) * n + k;
                    let hv = ad[idx] * h[ch * n + k] + bd[idx] * xv;
                    h[ch * n + k] = hv;
                    states[idx] = hv;
                    acc += ctn[k] * hv;
                }
                y[row + ch] = acc;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, states))
}

pub(crate) struct ScanGrads {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c: Tensor,
    pub x: Tensor,
}

pub(crate) fn scan_backward(g: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor, states: &[f64]) -> ScanGrads {
    let (batch, l, e, n) = scan_dims(a_bar, b_bar, c, x).expect("validated in forward");
    let (ad, bd, cd, xd, gd) = (a_bar.data(), b_bar.data(), c.data(), x.data(), g.data());
    let mut ga = vec![0.0; a_bar.numel()];
    let mut gb = vec![0.0; b_bar.numel()];
    let mut gc = vec![0.0; c.numel()];
    let mut gx = vec![0.0; x.numel()];
    let mut dh = vec![0.0; e * n];
    for p in 0..batch {
        dh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..l).rev() {
            let row = (p * l + t) * e;
            let crow = (p * l + t) * n;
            for ch in 0..e {
                let gy = gd[row + ch];
                for k in 0..n {
                    let idx = (row + ch) * n + k;
                    dh[ch * n + k] += gy * cd[crow + k];
                    gc[crow + k] += gy * states[idx];
                }
            }
            for ch in 0..e {
                let xv = xd[row + ch];
                let mut gxv = 0.0;
                for k in 0..n {
                    let idx = (row + ch) * n + k;
                    let d = dh[ch * n + k];
                    let h_prev = if t == 0 { 0.0 } else { states[idx - e * n] };
                    ga[idx] = d * h_prev;
                    gb[idx] = d * xv;
                    gxv += d * bd[idx];
                    dh[ch * n + k] = d * ad[idx];
                }
                gx[row + ch] = gxv;
            }
        }
    }
    let t = |s: &Tensor, d: Vec<f64>| Tensor::new(s.shape().to_vec(), d).expect("shape");
    ScanGrads {
        a_bar: t(a_bar, ga),
        b_bar: t(b_bar, gb),
        c: t(c, gc),
        x: t(x, gx),
    }
}
