//! Teacher-forced training with stochastic Jacobian-free backpropagation.
//!
//! Each step samples `n` gradient-free and `m` recorded equilibrium steps,
//! runs the whole hierarchy as one block-causal sequence, and backpropagates
//! through the recorded window only. The tape therefore grows with `m` and
//! never with `n`.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_mask, run_stack, AttnContext, EmbedSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, streams};
use crate::tensor::{kernels, Eager, Graph, Tape, Tensor};
use crate::tokenizer::{CodeBook, TokenHierarchy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Largest number of gradient-free steps `N`.
    pub max_free: usize,
    /// Largest number of recorded steps `M`.
    pub max_grad: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Per-sample probability of replacing the class with the null row.
    pub cond_dropout: f64,
    pub batch: usize,
    pub steps: u64,
    /// Linear warm-up length in steps.
    pub warmup: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_free: 10,
            max_grad: 12,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
            cond_dropout: 0.1,
            batch: 16,
            steps: 2000,
            warmup: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_grad == 0 {
            return Err(Error::Config("train.max_grad must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("train.cond_dropout must lie in [0, 1)".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be ≥ 1".into()));
        }
        let finite = [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("optimizer settings must be finite and ≥ 0".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("betas must be < 1".into()));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub label: usize,
    pub tokens: TokenHierarchy,
}

/// `n ~ U{0..N}`, `m ~ U{1..M}`.
pub fn sample_iters(rng: &mut impl Rng, max_free: usize, max_grad: usize) -> (usize, usize) {
    let n = rng.gen_range(0..=max_free);
    let m = rng.gen_range(1..=max_grad.max(1));
    (n, m)
}

/// Result of a teacher-forced pass.
pub struct TeacherForced<N> {
    /// `(B·T) × V`, rows ordered by sample then position.
    pub logits: N,
    pub loss: N,
    /// Flattened targets in logit-row order.
    pub targets: Vec<usize>,
    /// State entering the recorded window.
    pub z_start: Tensor,
    pub z_final: Tensor,
}

/// Runs the full hierarchy of every sample through the model.
///
/// Gradient-free steps run on a private [`Eager`] context. The recorded
/// window starts from `x` itself when `n = 0` and from a constant holding
/// `z_n` otherwise; both paths add exactly one node. `frozen_start`
/// replaces `z_n` (used to differentiate the truncated map numerically).
pub fn forward_teacher_forced<G: Graph>(
    g: &mut G,
    model: &Model,
    book: &CodeBook,
    batch: &[TrainSample],
    n: usize,
    m: usize,
    frozen_start: Option<&Tensor>,
) -> Result<TeacherForced<G::Node>> {
    if m == 0 {
        return Err(Error::Contract("at least one recorded step is required".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let h = &model.shape.hierarchy;
    for s in batch {
        s.tokens.validate(h, book.vocab())?;
    }
    let t = h.total_tokens();
    let mask = build_mask(h);
    let ctx = AttnContext::masked(mask.tensor(), batch.len());
    let samples: Vec<EmbedSample> = batch
        .iter()
        .map(|s| EmbedSample {
            label: s.label,
            tokens: &s.tokens,
        })
        .collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let e = model.embed.embed(g, book, h, &samples, 0..h.len())?;
    let cond = model.embed.cond.rows(g, &labels, t)?;
    let x = run_stack(g, &model.pre, &e, &cond, &ctx, None, None)?;

    let z_free = match frozen_start {
        Some(z) => z.clone(),
        None => {
            let x_val = g.value(&x).clone();
            let cond_val = g.value(&cond).clone();
            let mut eg = Eager::new(&model.params);
            let mut z = x_val.clone();
            for _ in 0..n {
                z = model.implicit.step(&mut eg, &z, &x_val, &cond_val, &ctx)?.out;
            }
            z
        }
    };
    let x_inj = g.identity(&x);
    let mut z = if n == 0 && frozen_start.is_none() {
        g.identity(&x)
    } else {
        g.constant(z_free.clone())
    };
    for _ in 0..m {
        z = model.implicit.step(g, &z, &x_inj, &cond, &ctx)?.out;
    }
    let z_final = g.value(&z).clone();
    let hidden = run_stack(g, &model.post, &z, &cond, &ctx, None, None)?;
    let logits = model.head.forward(g, &hidden)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.tokens.flatten()).collect();
    let loss = loss_total(g, &logits, &targets)?;
    Ok(TeacherForced {
        logits,
        loss,
        targets,
        z_start: z_free,
        z_final,
    })
}

/// Token-mean cross entropy over the concatenated hierarchy.
pub fn loss_total<G: Graph>(g: &mut G, logits: &G::Node, targets: &[usize]) -> Result<G::Node> {
    g.cross_entropy(logits, targets)
}

/// Mean cross entropy of each scale's positions across the batch.
pub fn per_scale_losses(
    logits: &Tensor,
    targets: &[usize],
    resolutions: &[usize],
) -> Result<Vec<f64>> {
    let t: usize = resolutions.iter().map(|n| n * n).sum();
    let v = logits.cols();
    if t == 0 || targets.len() % t != 0 || logits.rows() != targets.len() {
        return Err(Error::shape("per-scale loss", logits.shape(), &[targets.len()]));
    }
    let b = targets.len() / t;
    let mut out = Vec::with_capacity(resolutions.len());
    let mut off = 0;
    for n in resolutions {
        let len = n * n;
        let mut rows = Vec::with_capacity(b * len * v);
        let mut tg = Vec::with_capacity(b * len);
        for s in 0..b {
            let start = s * t + off;
            rows.extend_from_slice(&logits.data()[start * v..(start + len) * v]);
            tg.extend_from_slice(&targets[start..start + len]);
        }
        out.push(kernels::cross_entropy(&rows, &tg, v)?.0);
        off += len;
    }
    Ok(out)
}

/// Back-propagates the truncated loss into the parameter leaves.
pub fn sjfb_backward(tape: &mut Tape, loss: crate::tensor::Var) -> Result<()> {
    tape.backward(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub loss: f64,
    pub per_scale_losses: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub tape_nodes: usize,
    pub ms: f64,
}

/// AdamW moments for every parameter, kept at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// Hyper-parameters of one AdamW update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// Decoupled-decay Adam update at 1-based step `t`.
    pub fn update(&self, theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, decay: bool) {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let wd = if decay { self.weight_decay * theta[i] } else { 0.0 };
            theta[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + wd);
        }
    }
}

fn round32(x: &mut [f64]) {
    for v in x {
        *v = *v as f32 as f64;
    }
}

/// Mutable training state besides the parameters.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub opt: OptimizerState,
    pub data_rng: ChaCha8Rng,
    pub iters_rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(model: &Model, seed: u64) -> Self {
        Self {
            opt: OptimizerState::new(model),
            data_rng: rng::substream(seed, streams::DATA),
            iters_rng: rng::substream(seed, streams::ITERS),
        }
    }
}

/// One optimizer step on a batch drawn with replacement from `data`.
pub fn train_step(
    model: &mut Model,
    book: &CodeBook,
    data: &[TrainSample],
    cfg: &TrainConfig,
    state: &mut TrainerState,
) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let started = Instant::now();
    let (n, m) = sample_iters(&mut state.iters_rng, cfg.max_free, cfg.max_grad);
    let null = model.embed.cond.null();
    let batch: Vec<TrainSample> = (0..cfg.batch)
        .map(|_| {
            let i = state.data_rng.gen_range(0..data.len());
            let drop = state.data_rng.gen::<f64>() < cfg.cond_dropout;
            let mut s = data[i].clone();
            if drop {
                s.label = null;
            }
            s
        })
        .collect();

    let (report, grads) = {
        let mut tape = Tape::new(&model.params);
        let out = forward_teacher_forced(&mut tape, model, book, &batch, n, m, None)?;
        let loss = tape.value(&out.loss).item()?;
        let per_scale = per_scale_losses(
            tape.value(&out.logits),
            &out.targets,
            model.shape.hierarchy.resolutions(),
        )?;
        let mut report = LossReport {
            step: state.opt.step + 1,
            loss,
            per_scale_losses: per_scale,
            n,
            m,
            tape_nodes: tape.len(),
            ms: 0.0,
        };
        if !loss.is_finite() {
            report.ms = started.elapsed().as_secs_f64() * 1e3;
            return Err(Error::Training {
                step: report.step,
                report: Box::new(report),
            });
        }
        sjfb_backward(&mut tape, out.loss)?;
        (report, tape.param_grads())
    };

    let mut grads: Vec<Vec<f64>> = grads
        .into_iter()
        .zip(model.params.iter())
        .map(|(g, (_, _, p))| g.map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec()))
        .collect();
    if cfg.clip_norm > 0.0 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    state.opt.step += 1;
    let t = state.opt.step;
    let warm = if cfg.warmup > 0 {
        (t as f64 / cfg.warmup as f64).min(1.0)
    } else {
        1.0
    };
    let adam = AdamW {
        lr: cfg.lr * warm,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = model.params.get(id);
        let shape = p.shape().to_vec();
        let decay = shape.len() >= 2;
        let mut theta = p.to_vec();
        let mut m1 = state.opt.first[i].to_vec();
        let mut m2 = state.opt.second[i].to_vec();
        adam.update(&mut theta, &grads[i], &mut m1, &mut m2, t, decay);
        round32(&mut theta);
        round32(&mut m1);
        round32(&mut m2);
        model.params.set(id, Tensor::new(shape.clone(), theta)?);
        state.opt.first[i] = Tensor::new(shape.clone(), m1)?;
        state.opt.second[i] = Tensor::new(shape, m2)?;
    }
    let mut report = report;
    report.ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Gradient-free loss of `batch` with `iters` equilibrium steps.
pub fn evaluate_loss(
    model: &Model,
    book: &CodeBook,
    batch: &[TrainSample],
    iters: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Eager::new(&model.params);
    let out = forward_teacher_forced(&mut g, model, book, batch, 0, iters.max(1), None)?;
    let per = per_scale_losses(&out.logits, &out.targets, model.shape.hierarchy.resolutions())?;
    Ok((out.loss.item()?, per))
}
