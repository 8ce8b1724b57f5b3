//! Raw slice kernels shared by the eager and recording contexts.

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn rowmajor(cols: usize) -> Self {
        Self { offset: 0, rs: cols as isize, cs: 1 }
    }

    pub fn transposed(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols as isize }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: View, rows: usize, cols: usize| {
        v.offset as isize + (rows as isize - 1) * v.rs + (cols as isize - 1) * v.cs
    };
    assert!(k == 0 || (last(av, m, k) as usize) < a.len());
    assert!(k == 0 || (last(bv, k, n) as usize) < b.len());
    assert!((last(cv, m, n) as usize) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        View::rowmajor(k),
        b,
        View::rowmajor(n),
        0.0,
        &mut out,
        View::rowmajor(n),
    );
    out
}

/// `g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    gemm(
        m,
        n,
        k,
        1.0,
        g,
        View::rowmajor(n),
        b,
        View::transposed(n),
        0.0,
        &mut out,
        View::rowmajor(k),
    );
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    gemm(
        k,
        m,
        n,
        1.0,
        a,
        View::transposed(k),
        g,
        View::rowmajor(n),
        0.0,
        &mut out,
        View::rowmajor(n),
    );
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Additive-mask softmax over each row of `scores` (`rows×cols`).
///
/// `mask` is either `rows×cols` or a single `cols` row broadcast to all rows.
pub fn masked_softmax_rows(
    scores: &[f64],
    mask: Option<&[f64]>,
    cols: usize,
    out: &mut [f64],
) -> Result<()> {
    let rows = scores.len() / cols.max(1);
    for r in 0..rows {
        let s = &scores[r * cols..(r + 1) * cols];
        let m = mask.map(|m| {
            if m.len() == cols {
                m
            } else {
                &m[r * cols..(r + 1) * cols]
            }
        });
        let o = &mut out[r * cols..(r + 1) * cols];
        softmax_row(s, m, o).map_err(|_| Error::DegenerateRow { row: r })?;
    }
    Ok(())
}

pub(crate) fn softmax_row(s: &[f64], mask: Option<&[f64]>, out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in s.iter().enumerate() {
        let v = v + mask.map_or(0.0, |m| m[j]);
        out[j] = v;
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = if *o == f64::NEG_INFINITY { 0.0 } else { (*o - max).exp() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Backward of a row softmax: `dx = p ⊙ (g − Σ g⊙p)`.
pub fn softmax_rows_backward(p: &[f64], g: &[f64], cols: usize, dx: &mut [f64]) {
    for ((pr, gr), dr) in p
        .chunks(cols)
        .zip(g.chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
            *d = pv * (gv - dot);
        }
    }
}

/// Layer normalization over rows of width `cols`; returns `(y, xhat, rstd)`.
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (xr[j] - mean) * rs;
            xhat[r * cols + j] = h;
            y[r * cols + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; g.len()];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let n = cols as f64;
    let mut dxhat = vec![0.0; cols];
    for (r, &rs) in rstd.iter().enumerate() {
        let gr = &g[r * cols..(r + 1) * cols];
        let hr = &xhat[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        let mut sum_h = 0.0;
        for j in 0..cols {
            dgain[j] += gr[j] * hr[j];
            dbias[j] += gr[j];
            dxhat[j] = gr[j] * gain[j];
            sum += dxhat[j];
            sum_h += dxhat[j] * hr[j];
        }
        for j in 0..cols {
            dx[r * cols + j] = rs / n * (n * dxhat[j] - sum - hr[j] * sum_h);
        }
    }
    (dx, dgain, dbias)
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub width: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `(batch·q_len)×width`, `k`/`v` are `(batch·kv_len)×width`, heads
/// are contiguous column groups. Returns the concatenated head outputs and
/// the attention probabilities laid out `[batch][head][q][kv]`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: Option<&[f64]>,
    d: AttnDims,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dh = d.head_dim();
    let w = d.width;
    let scale = 1.0 / (dh as f64).sqrt();
    let plane = d.q_len * d.kv_len;
    let mut out = vec![0.0; d.batch * d.q_len * w];
    let mut probs = vec![0.0; d.batch * d.heads * plane];
    let mut scores = vec![0.0; plane];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = b * d.q_len * w + h * dh;
            let ko = b * d.kv_len * w + h * dh;
            gemm(
                d.q_len,
                dh,
                d.kv_len,
                scale,
                q,
                View::rowmajor(w).at(qo),
                k,
                View::transposed(w).at(ko),
                0.0,
                &mut scores,
                View::rowmajor(d.kv_len),
            );
            let p = &mut probs[(b * d.heads + h) * plane..(b * d.heads + h + 1) * plane];
            for r in 0..d.q_len {
                let row = &scores[r * d.kv_len..(r + 1) * d.kv_len];
                let m = mask.map(|m| &m[r * d.kv_len..(r + 1) * d.kv_len]);
                softmax_row(row, m, &mut p[r * d.kv_len..(r + 1) * d.kv_len])
                    .map_err(|_| Error::DegenerateRow { row: r })?;
            }
            gemm(
                d.q_len,
                d.kv_len,
                dh,
                1.0,
                p,
                View::rowmajor(d.kv_len),
                v,
                View::rowmajor(w).at(ko),
                0.0,
                &mut out,
                View::rowmajor(w).at(qo),
            );
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)` for [`attention`].
pub fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d.head_dim();
    let w = d.width;
    let scale = 1.0 / (dh as f64).sqrt();
    let plane = d.q_len * d.kv_len;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; plane];
    let mut ds = vec![0.0; plane];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = b * d.q_len * w + h * dh;
            let ko = b * d.kv_len * w + h * dh;
            let p = &probs[(b * d.heads + h) * plane..(b * d.heads + h + 1) * plane];
            // dP = dO · Vᵀ
            gemm(
                d.q_len,
                dh,
                d.kv_len,
                1.0,
                g,
                View::rowmajor(w).at(qo),
                v,
                View::transposed(w).at(ko),
                0.0,
                &mut dp,
                View::rowmajor(d.kv_len),
            );
            // dV += Pᵀ · dO
            gemm(
                d.kv_len,
                d.q_len,
                dh,
                1.0,
                p,
                View::transposed(d.kv_len),
                g,
                View::rowmajor(w).at(qo),
                1.0,
                &mut dv,
                View::rowmajor(w).at(ko),
            );
            softmax_rows_backward(p, &dp, d.kv_len, &mut ds);
            // dQ = scale · dS · K
            gemm(
                d.q_len,
                d.kv_len,
                dh,
                scale,
                &ds,
                View::rowmajor(d.kv_len),
                k,
                View::rowmajor(w).at(ko),
                1.0,
                &mut dq,
                View::rowmajor(w).at(qo),
            );
            // dK = scale · dSᵀ · Q
            gemm(
                d.kv_len,
                d.q_len,
                dh,
                scale,
                &ds,
                View::transposed(d.kv_len),
                q,
                View::rowmajor(w).at(qo),
                1.0,
                &mut dk,
                View::rowmajor(w).at(ko),
            );
        }
    }
    (dq, dk, dv)
}

/// Mean token cross entropy; returns `(loss, softmax probabilities)`.
pub fn cross_entropy(logits: &[f64], targets: &[usize], vocab: usize) -> Result<(f64, Vec<f64>)> {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Index {
                index: t,
                extent: vocab,
            });
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    Ok((total / targets.len().max(1) as f64, probs))
}
