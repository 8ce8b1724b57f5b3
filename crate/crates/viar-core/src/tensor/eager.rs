use super::graph::{self, AttentionSpec, Graph};
use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Immediate evaluation with no gradient tracking.
#[derive(Clone, Copy)]
pub struct Eager<'p> {
    params: Option<&'p ParamStore>,
}

impl<'p> Eager<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
        }
    }

    /// A context with no parameters bound; `param` panics.
    pub fn bare() -> Self {
        Self { params: None }
    }
}

impl Graph for Eager<'_> {
    type Node = Tensor;

    fn value<'a>(&'a self, x: &'a Tensor) -> &'a Tensor {
        x
    }

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn param(&mut self, id: ParamId) -> Tensor {
        self.params.expect("no parameter store bound").get(id).clone()
    }

    fn identity(&mut self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        graph::matmul(a, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        graph::add(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        graph::mul(a, b)
    }

    fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        graph::add_bias(x, bias)
    }

    fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        x.map(|v| v * factor)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        x.map(kernels::gelu)
    }

    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(graph::layer_norm(x, gain, bias)?.y)
    }

    fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        graph::concat_cols(a, b)
    }

    fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        graph::concat_rows(a, b)
    }

    fn gather_rows(&mut self, table: &Tensor, index: &[usize]) -> Result<Tensor> {
        graph::gather_rows(table, index)
    }

    fn masked_softmax(&mut self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        graph::masked_softmax(x, mask)
    }

    fn attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        spec: &AttentionSpec,
    ) -> Result<Tensor> {
        Ok(graph::attention(q, k, v, spec)?.0)
    }

    fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        Ok(graph::cross_entropy(logits, targets)?.0)
    }

    fn sum(&mut self, x: &Tensor) -> Tensor {
        graph::sum(x)
    }
}
