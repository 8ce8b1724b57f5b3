use super::graph::{self, AttentionSpec, Graph};
use super::kernels::{self, AttnDims};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Identity(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        dims: AttnDims,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    grad: Option<Vec<f64>>,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// A tape lives for one training step. Parameters are bound lazily: the
/// first `param(id)` call creates a leaf that later calls reuse, so a
/// weight-tied layer applied many times accumulates into one gradient.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn bare() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes, including leaves.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Same values as `x`, with no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn grad(&self, x: Var) -> Option<Tensor> {
        let node = &self.nodes[x.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Gradients for every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| self.grad(v)))
            .collect()
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else {
                self.propagate(&node.op, &node.value, g, &mut grads);
            }
        }
        Ok(())
    }

    fn deposit(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => unreachable!(),
            Op::Identity(x) => self.deposit(grads, *x, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    self.deposit(grads, *a, kernels::matmul_bt(&g, bv.data(), m, k, n));
                }
                if self.nodes[b.0].requires_grad {
                    self.deposit(grads, *b, kernels::matmul_at(av.data(), &g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.deposit(grads, *a, g.clone());
                self.deposit(grads, *b, g);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let d = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    self.deposit(grads, *a, d);
                }
                if self.nodes[b.0].requires_grad {
                    let d = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    self.deposit(grads, *b, d);
                }
            }
            Op::AddBias(x, bias) => {
                let c = out.cols();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.deposit(grads, *bias, gb);
                self.deposit(grads, *x, g);
            }
            Op::Scale(x, f) => self.deposit(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::Gelu(x) => {
                let xs = val(x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.deposit(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(&g, xhat, rstd, val(gain).data(), out.cols());
                self.deposit(grads, *x, dx);
                self.deposit(grads, *gain, dg);
                self.deposit(grads, *bias, db);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let mut ga = Vec::with_capacity(val(a).numel());
                let mut gb = Vec::with_capacity(val(b).numel());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.deposit(grads, *a, ga);
                self.deposit(grads, *b, gb);
            }
            Op::ConcatRows(a, b) => {
                let split = val(a).numel();
                self.deposit(grads, *b, g[split..].to_vec());
                let mut g = g;
                g.truncate(split);
                self.deposit(grads, *a, g);
            }
            Op::GatherRows(table, index) => {
                let tv = val(table);
                let c = tv.cols();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &i) in index.iter().enumerate() {
                    gt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                self.deposit(grads, *table, gt);
            }
            Op::MaskedSoftmax(x) => {
                let mut dx = vec![0.0; g.len()];
                kernels::softmax_rows_backward(out.data(), &g, out.cols(), &mut dx);
                self.deposit(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                dims,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    &g,
                    val(q).data(),
                    val(k).data(),
                    val(v).data(),
                    probs,
                    *dims,
                );
                self.deposit(grads, *q, dq);
                self.deposit(grads, *k, dk);
                self.deposit(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = val(logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= scale;
                }
                self.deposit(grads, *logits, dl);
            }
            Op::Sum(x) => self.deposit(grads, *x, vec![g[0]; val(x).numel()]),
        }
    }
}

impl Graph for Tape<'_> {
    type Node = Var;

    fn value<'a>(&'a self, x: &'a Var) -> &'a Tensor {
        &self.nodes[x.0].value
    }

    fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.expect("no parameter store bound").get(id).clone();
        let v = self.leaf(value);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn identity(&mut self, x: &Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[*x]);
        self.push(value, Op::Identity(*x), rg)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = graph::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::MatMul(*a, *b), rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = graph::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::Add(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = graph::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::Mul(*a, *b), rg))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let value = graph::add_bias(self.value(x), self.value(bias))?;
        let rg = self.rg(&[*x, *bias]);
        Ok(self.push(value, Op::AddBias(*x, *bias), rg))
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[*x]);
        self.push(value, Op::Scale(*x, factor), rg)
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.rg(&[*x]);
        self.push(value, Op::Gelu(*x), rg)
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let out = graph::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(&[*x, *gain, *bias]);
        Ok(self.push(
            out.y,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                xhat: out.xhat,
                rstd: out.rstd,
            },
            rg,
        ))
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = graph::concat_cols(self.value(a), self.value(b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::ConcatCols(*a, *b), rg))
    }

    fn concat_rows(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = graph::concat_rows(self.value(a), self.value(b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(value, Op::ConcatRows(*a, *b), rg))
    }

    fn gather_rows(&mut self, table: &Var, index: &[usize]) -> Result<Var> {
        let value = graph::gather_rows(self.value(table), index)?;
        let rg = self.rg(&[*table]);
        Ok(self.push(value, Op::GatherRows(*table, index.to_vec()), rg))
    }

    fn masked_softmax(&mut self, x: &Var, mask: Option<&Tensor>) -> Result<Var> {
        let value = graph::masked_softmax(self.value(x), mask)?;
        let rg = self.rg(&[*x]);
        Ok(self.push(value, Op::MaskedSoftmax(*x), rg))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, spec: &AttentionSpec) -> Result<Var> {
        let (value, probs, dims) =
            graph::attention(self.value(q), self.value(k), self.value(v), spec)?;
        let rg = self.rg(&[*q, *k, *v]);
        Ok(self.push(
            value,
            Op::Attention {
                q: *q,
                k: *k,
                v: *v,
                probs,
                dims,
            },
            rg,
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (value, probs) = graph::cross_entropy(self.value(logits), targets)?;
        let rg = self.rg(&[*logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: *logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let value = graph::sum(self.value(x));
        let rg = self.rg(&[*x]);
        self.push(value, Op::Sum(*x), rg)
    }
}
