//! Slice-level numeric kernels shared by eager tensor methods and the tape.

use super::{cst, Real};
use crate::error::{Error, Result};

const MR: usize = 4;
const NR: usize = 8;

/// `out[m,n] += a[m,k] * b[k,n]`
///
/// Full `MR x NR` output tiles are accumulated in registers across the whole
/// `k` loop; ragged edges fall back to a row-wise axpy loop.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let (a, b) = (&a[..m * k], &b[..k * n]);
    let out = &mut out[..m * n];
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i in (0..m_main).step_by(MR) {
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        acc_row[c] += av * brow[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let orow = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    orow[c] += acc_row[c];
                }
            }
        }
        if n_main < n {
            gemm_nn_rows(a, b, out, i, i + MR, k, n, n_main);
        }
    }
    gemm_nn_rows(a, b, out, m_main, m, k, n, 0);
}

/// Row-wise kernel over rows `r0..r1` and columns `c0..n`.
#[allow(clippy::too_many_arguments)]
fn gemm_nn_rows<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    r0: usize,
    r1: usize,
    k: usize,
    n: usize,
    c0: usize,
) {
    for i in r0..r1 {
        let orow = &mut out[i * n + c0..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n + c0..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]` (rhs transposed)
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // Row-times-row dot products do not vectorize; for tall lhs it is
    // cheaper to transpose the rhs once and run the axpy-style kernel.
    if m >= 8 {
        let mut bt = vec![T::zero(); k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        gemm_nn(a, &bt, out, m, k, n);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]` (lhs transposed)
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// How the batch dims of a matmul line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BatchMode {
    /// Both operands carry the same batch dims.
    Paired,
    /// rhs is a plain matrix shared by every lhs batch.
    SharedRhs,
    /// lhs is a plain matrix shared by every rhs batch.
    SharedLhs,
}

pub(crate) struct MatmulPlan {
    pub mode: BatchMode,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(err());
    }
    let (m, k, n) = (am[0], am[1], bm[1]);
    let (mode, batch_dims) = if ab == bb {
        (BatchMode::Paired, ab)
    } else if bb.is_empty() {
        (BatchMode::SharedRhs, ab)
    } else if ab.is_empty() {
        (BatchMode::SharedLhs, bb)
    } else {
        return Err(err());
    };
    let mut out_shape = batch_dims.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        mode,
        batch: batch_dims.iter().product(),
        m,
        k,
        n,
        out_shape,
    })
}

pub(crate) fn matmul_forward<T: Real>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let MatmulPlan { batch, m, k, n, .. } = *plan;
    let mut out = vec![T::zero(); batch * m * n];
    match plan.mode {
        // Rows of all batches are contiguous, so a shared rhs is one big gemm.
        BatchMode::SharedRhs => gemm_nn(a, b, &mut out, batch * m, k, n),
        BatchMode::Paired => {
            for i in 0..batch {
                gemm_nn(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        BatchMode::SharedLhs => {
            for i in 0..batch {
                gemm_nn(
                    a,
                    &b[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
    out
}

/// Accumulates `dA += dOut * B^T`.
pub(crate) fn matmul_grad_lhs<T: Real>(plan: &MatmulPlan, g: &[T], b: &[T], da: &mut [T]) {
    let MatmulPlan { batch, m, k, n, .. } = *plan;
    match plan.mode {
        BatchMode::SharedRhs => gemm_nt(g, b, da, batch * m, n, k),
        BatchMode::Paired => {
            for i in 0..batch {
                gemm_nt(
                    &g[i * m * n..(i + 1) * m * n],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut da[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
        }
        BatchMode::SharedLhs => {
            for i in 0..batch {
                gemm_nt(
                    &g[i * m * n..(i + 1) * m * n],
                    &b[i * k * n..(i + 1) * k * n],
                    da,
                    m,
                    n,
                    k,
                );
            }
        }
    }
}

/// Accumulates `dB += A^T * dOut`.
pub(crate) fn matmul_grad_rhs<T: Real>(plan: &MatmulPlan, g: &[T], a: &[T], db: &mut [T]) {
    let MatmulPlan { batch, m, k, n, .. } = *plan;
    match plan.mode {
        BatchMode::SharedRhs => gemm_tn(a, g, db, batch * m, k, n),
        BatchMode::Paired => {
            for i in 0..batch {
                gemm_tn(
                    &a[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    &mut db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        BatchMode::SharedLhs => {
            for i in 0..batch {
                gemm_tn(
                    a,
                    &g[i * m * n..(i + 1) * m * n],
                    &mut db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

pub fn batched_matmul<T: Real>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
) -> Result<(Vec<usize>, Vec<T>)> {
    let plan = plan_matmul(a_shape, b_shape)?;
    let out = matmul_forward(&plan, a, b);
    Ok((plan.out_shape, out))
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    // 0.5 * (1 + tanh(u)) == sigmoid(2u); the sigmoid form avoids libm tanh.
    let u = cst::<T>(GELU_C) * (x + cst::<T>(GELU_A) * x * x * x);
    x * sigmoid(u + u)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let a = cst::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = sigmoid(u + u);
    let du = c * (T::one() + cst::<T>(3.0) * a * x * x);
    // d/du sigmoid(2u) = 2 s (1 - s)
    s + x * (s + s) * (T::one() - s) * du
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Normalizes `row` in place. When `saved` is given, stores the pre-affine
/// `xhat` values into it and returns `1/sqrt(var + eps)`.
pub fn layer_norm_row<T: Real>(
    row: &mut [T],
    gain: &[T],
    bias: &[T],
    eps: T,
    saved: Option<&mut [T]>,
) -> T {
    let n = cst::<T>(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    match saved {
        Some(xhat) => {
            for (((v, h), &g), &b) in row.iter_mut().zip(xhat.iter_mut()).zip(gain).zip(bias) {
                *h = (*v - mean) * rstd;
                *v = *h * g + b;
            }
        }
        None => {
            for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
    }
    rstd
}

/// Geometry of a multi-head attention call: `q` is `[batch, tq, d]`,
/// `k`/`v` are `[batch, tk, d]`, split into `heads` slices of the last axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

/// Returns `(output, probs)` with probs laid out `[batch, heads, tq, tk]`.
pub(crate) fn attention_forward<T: Real>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        tq,
        tk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let scale = T::one() / cst::<T>(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * tq * d];
    let mut probs = vec![T::zero(); batch * heads * tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qrow = &q[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                let prow = &mut probs
                    [((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                for (j, p) in prow.iter_mut().enumerate() {
                    let krow = &k[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    let mut s = T::zero();
                    for (&x, &y) in qrow.iter().zip(krow) {
                        s += x * y;
                    }
                    *p = s * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vrow = &v[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Accumulates input gradients for [`attention_forward`]. Any of the
/// destination buffers may be `None` when that input needs no gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        tq,
        tk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let scale = T::one() / cst::<T>(dh as f64).sqrt();
    let mut dp = vec![T::zero(); tk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let prow =
                    &probs[((b * heads + h) * tq + i) * tk..((b * heads + h) * tq + i + 1) * tk];
                let grow = &g[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                // dP = dO . V^T, dV += P^T . dO
                for j in 0..tk {
                    let vbase = (b * tk + j) * d + off;
                    let vrow = &v[vbase..vbase + dh];
                    let mut s = T::zero();
                    for (&x, &y) in grow.iter().zip(vrow) {
                        s += x * y;
                    }
                    dp[j] = s;
                    if let Some(dv) = dv.as_deref_mut() {
                        let p = prow[j];
                        for (o, &y) in dv[vbase..vbase + dh].iter_mut().zip(grow) {
                            *o += p * y;
                        }
                    }
                }
                let dot: T = prow.iter().zip(&dp).map(|(&p, &x)| p * x).sum();
                let qbase = (b * tq + i) * d + off;
                for j in 0..tk {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kbase = (b * tk + j) * d + off;
                    if let Some(dq) = dq.as_deref_mut() {
                        for (o, &y) in dq[qbase..qbase + dh].iter_mut().zip(&k[kbase..kbase + dh]) {
                            *o += ds * y;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        for (o, &y) in dk[kbase..kbase + dh].iter_mut().zip(&q[qbase..qbase + dh]) {
                            *o += ds * y;
                        }
                    }
                }
            }
        }
    }
}
