//! Slice-level forward and backward kernels. Shapes are validated by the
//! graph layer before anything here runs.

use crate::scalar::Scalar;
use crate::tensor::strides;

/// Batch layout of a broadcast matmul: output batch shape plus, for every
/// output batch index, the element offsets of the matching `a` and `b` blocks.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch_shape: Vec<usize>,
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
    /// `b` is a single matrix shared by every batch entry.
    pub shared_b: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan, String> {
    if a.len() < 2 || b.len() < 2 {
        return Err(format!("operands must have rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(format!("inner dimensions differ: {a:?} x {b:?} ({k} != {kb})"));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ba.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut batch_shape = Vec::with_capacity(rank);
    for (i, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
        if x != y && x != 1 && y != 1 {
            return Err(format!("batch extent {i} not broadcastable: {a:?} x {b:?}"));
        }
        batch_shape.push(x.max(y));
    }
    let nbatch: usize = batch_shape.iter().product();
    let (sa, sb) = (strides(&pa), strides(&pb));
    let mut a_offsets = Vec::with_capacity(nbatch);
    let mut b_offsets = Vec::with_capacity(nbatch);
    let mut idx = vec![0usize; rank];
    for _ in 0..nbatch {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        a_offsets.push(oa * m * k);
        b_offsets.push(ob * k * n);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let shared_b = bb.iter().all(|&e| e == 1) && pa.iter().zip(&batch_shape).all(|(x, y)| x == y);
    Ok(MatmulPlan {
        m,
        k,
        n,
        batch_shape,
        a_offsets,
        b_offsets,
        shared_b,
    })
}

pub(crate) fn matmul_forward<S: Scalar>(p: &MatmulPlan, a: &[S], b: &[S]) -> Vec<S> {
    let (m, k, n) = (p.m, p.k, p.n);
    let nbatch = p.a_offsets.len();
    let mut out = vec![S::zero(); nbatch * m * n];
    if p.shared_b {
        let rows = nbatch * m;
        S::gemm(rows, k, n, S::one(), (a, k as isize, 1), (b, n as isize, 1), S::zero(), &mut out, n as isize);
        return out;
    }
    for (i, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            (&a[oa..oa + m * k], k as isize, 1),
            (&b[ob..ob + k * n], n as isize, 1),
            S::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
        );
    }
    out
}

/// `da += g * b^T`
pub(crate) fn matmul_backward_a<S: Scalar>(p: &MatmulPlan, g: &[S], b: &[S], da: &mut [S]) {
    let (m, k, n) = (p.m, p.k, p.n);
    if p.shared_b {
        let rows = p.a_offsets.len() * m;
        S::gemm(rows, n, k, S::one(), (g, n as isize, 1), (b, 1, n as isize), S::one(), da, k as isize);
        return;
    }
    for (i, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        S::gemm(
            m,
            n,
            k,
            S::one(),
            (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
            (&b[ob..ob + k * n], 1, n as isize),
            S::one(),
            &mut da[oa..oa + m * k],
            k as isize,
        );
    }
}

/// `db += a^T * g`
pub(crate) fn matmul_backward_b<S: Scalar>(p: &MatmulPlan, g: &[S], a: &[S], db: &mut [S]) {
    let (m, k, n) = (p.m, p.k, p.n);
    if p.shared_b {
        let rows = p.a_offsets.len() * m;
        S::gemm(k, rows, n, S::one(), (a, 1, k as isize), (g, n as isize, 1), S::one(), db, n as isize);
        return;
    }
    for (i, (&oa, &ob)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        S::gemm(
            k,
            m,
            n,
            S::one(),
            (&a[oa..oa + m * k], 1, k as isize),
            (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
            S::one(),
            &mut db[ob..ob + k * n],
            n as isize,
        );
    }
}

/// Gathers `src` (shape `shape`) into the layout obtained by permuting its axes.
pub(crate) fn permute<S: Scalar>(src: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn depthwise_conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    batch: usize,
    channels: usize,
    len: usize,
    k: usize,
) -> Vec<S> {
    let pad = (k - 1) / 2;
    let mut y = vec![S::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let xr = &x[off..off + len];
            let yr = &mut y[off..off + len];
            let wr = &w[c * k..(c + 1) * k];
            for (j, &wj) in wr.iter().enumerate() {
                // y[t] += x[t + j - pad] * w[j] over the valid range of t
                let shift = j as isize - pad as isize;
                let t0 = (-shift).max(0) as usize;
                let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
                for t in t0..t1 {
                    yr[t] += xr[(t as isize + shift) as usize] * wj;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_conv1d_backward<S: Scalar>(
    g: &[S],
    x: &[S],
    w: &[S],
    batch: usize,
    channels: usize,
    len: usize,
    k: usize,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
) {
    let pad = (k - 1) / 2;
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            let gr = &g[off..off + len];
            for j in 0..k {
                let shift = j as isize - pad as isize;
                let t0 = (-shift).max(0) as usize;
                let t1 = ((len as isize - shift).min(len as isize)).max(0) as usize;
                if let Some(dx) = dx.as_deref_mut() {
                    let wj = w[c * k + j];
                    let dxr = &mut dx[off..off + len];
                    for t in t0..t1 {
                        dxr[(t as isize + shift) as usize] += gr[t] * wj;
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xr = &x[off..off + len];
                    let mut acc = S::zero();
                    for t in t0..t1 {
                        acc += gr[t] * xr[(t as isize + shift) as usize];
                    }
                    dw[c * k + j] += acc;
                }
            }
        }
    }
}

const GELU_A: f64 = 0.044_715;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    // 0.5 x (1 + tanh z) == x * sigmoid(2 z)
    x / (S::one() + (S::of(-2.0) * gelu_inner(x)).exp())
}

#[inline]
fn gelu_inner<S: Scalar>(x: S) -> S {
    S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x)
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let s = (S::one() + (S::of(-2.0) * gelu_inner(x)).exp()).recip();
    let dinner = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    s + S::of(2.0) * x * s * (S::one() - s) * dinner
}

pub(crate) fn softmax_rows<S: Scalar>(x: &[S], width: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (xr, yr) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            total += *y;
        }
        let inv = total.recip();
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<S: Scalar>(x: &[S], width: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (xr, yr) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
        }
    }
    out
}
