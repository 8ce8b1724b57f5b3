use super::kernels::{self, AttnDims};
use super::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Settings for a batched multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    /// Additive `q_len×kv_len` mask shared by every batch entry and head.
    pub mask: Option<Tensor>,
}

/// The operation set every model forward pass is written against.
///
/// [`super::Eager`] evaluates immediately and records nothing;
/// [`super::Tape`] records each call for reverse-mode differentiation.
pub trait Graph {
    type Node: Clone;

    fn value<'a>(&'a self, x: &'a Self::Node) -> &'a Tensor;
    fn constant(&mut self, value: Tensor) -> Self::Node;
    fn param(&mut self, id: ParamId) -> Self::Node;
    fn identity(&mut self, x: &Self::Node) -> Self::Node;
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// Elementwise product.
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// Adds a length-`cols` vector to every row.
    fn add_bias(&mut self, x: &Self::Node, bias: &Self::Node) -> Result<Self::Node>;
    fn scale(&mut self, x: &Self::Node, factor: f64) -> Self::Node;
    fn gelu(&mut self, x: &Self::Node) -> Self::Node;
    fn layer_norm(
        &mut self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
    ) -> Result<Self::Node>;
    fn concat_cols(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn concat_rows(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn gather_rows(&mut self, table: &Self::Node, index: &[usize]) -> Result<Self::Node>;
    fn masked_softmax(&mut self, x: &Self::Node, mask: Option<&Tensor>) -> Result<Self::Node>;
    fn attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        spec: &AttentionSpec,
    ) -> Result<Self::Node>;
    fn cross_entropy(&mut self, logits: &Self::Node, targets: &[usize]) -> Result<Self::Node>;
    fn sum(&mut self, x: &Self::Node) -> Self::Node;
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

pub(super) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        kernels::matmul(a.data(), b.data(), m, k, n),
    ))
}

pub(super) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    a.zip_map(b, |x, y| x + y)
}

pub(super) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    a.zip_map(b, |x, y| x * y)
}

pub(super) fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if bias.numel() != c {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(super) struct LayerNormOut {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(super) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNormOut> {
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (y, xhat, rstd) = kernels::layer_norm(x.data(), gain.data(), bias.data(), c);
    Ok(LayerNormOut {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        rstd,
    })
}

pub(super) fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = require_2d("concat_cols", a)?;
    let (rb, cb) = require_2d("concat_cols", b)?;
    if ra != rb {
        return Err(Error::shape("concat_cols", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for r in 0..ra {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor::from_parts(vec![ra, ca + cb], data))
}

pub(super) fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_2d("concat_rows", a)?;
    require_2d("concat_rows", b)?;
    Tensor::concat_rows(&[a, b])
}

pub(super) fn gather_rows(table: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (rows, c) = require_2d("gather_rows", table)?;
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= rows {
            return Err(Error::Index {
                index: i,
                extent: rows,
            });
        }
        data.extend_from_slice(table.row(i));
    }
    Ok(Tensor::from_parts(vec![index.len(), c], data))
}

pub(super) fn masked_softmax(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let c = x.cols();
    if let Some(m) = mask {
        if m.numel() != c && m.shape() != x.shape() {
            return Err(Error::shape("masked_softmax", x.shape(), m.shape()));
        }
    }
    let mut out = vec![0.0; x.numel()];
    kernels::masked_softmax_rows(x.data(), mask.map(Tensor::data), c, &mut out)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(super) fn attention_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
) -> Result<AttnDims> {
    let (qr, w) = require_2d("attention", q)?;
    let (kr, kw) = require_2d("attention", k)?;
    if kw != w || k.shape() != v.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if spec.heads == 0 || w % spec.heads != 0 || spec.batch == 0 {
        return Err(Error::Contract(format!(
            "width {w} is not divisible into {} heads",
            spec.heads
        )));
    }
    if qr % spec.batch != 0 || kr % spec.batch != 0 {
        return Err(Error::shape("attention", q.shape(), &[spec.batch]));
    }
    let dims = AttnDims {
        batch: spec.batch,
        heads: spec.heads,
        q_len: qr / spec.batch,
        kv_len: kr / spec.batch,
        width: w,
    };
    if let Some(m) = &spec.mask {
        if m.shape() != [dims.q_len, dims.kv_len] {
            return Err(Error::shape(
                "attention mask",
                m.shape(),
                &[dims.q_len, dims.kv_len],
            ));
        }
    }
    Ok(dims)
}

pub(super) fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
) -> Result<(Tensor, Vec<f64>, AttnDims)> {
    let dims = attention_dims(q, k, v, spec)?;
    let (out, probs) = kernels::attention(
        q.data(),
        k.data(),
        v.data(),
        spec.mask.as_ref().map(Tensor::data),
        dims,
    )?;
    Ok((Tensor::from_parts(q.shape().to_vec(), out), probs, dims))
}

pub(super) fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let (rows, v) = require_2d("cross_entropy", logits)?;
    if rows != targets.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let (loss, probs) = kernels::cross_entropy(logits.data(), targets, v)?;
    Ok((Tensor::scalar(loss), probs))
}

pub(super) fn sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}
