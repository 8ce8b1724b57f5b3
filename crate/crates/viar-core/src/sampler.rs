//! Coarse-to-fine generation under a per-scale iteration schedule.
//!
//! Each scale runs the explicit pre-stack, the equilibrium solve, the
//! explicit post-stack, and the head over that scale's tokens only, reading
//! coarser scales from a key/value cache. The implicit layer's cache is
//! partitioned by iteration index: iteration `t` of scale `k` attends to
//! the keys each coarser scale produced at its own iteration `t`, or at its
//! final iteration when it ran fewer than `t` steps.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_mask, run_stack, AttnContext, EmbedSample};
use crate::equilibrium::{solve_fixed_point, EquilibriumConfig, EquilibriumState, IterationTrace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;
use crate::rng::{self, streams};
use crate::schedule::IterSchedule;
use crate::tensor::{Eager, Tensor};
use crate::tokenizer::{CodeBook, TokenGrid, TokenHierarchy, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// `s` in `uncond + s·(cond − uncond)`.
    pub scale: f64,
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; 0 disables.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be ≥ 0", self.scale)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `uncond + s·(cond − uncond)`, returning either input unchanged at
/// `s = 1` and `s = 0`.
pub fn apply_guidance(cond: &Tensor, uncond: &Tensor, s: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape("guidance", cond.shape(), uncond.shape()));
    }
    if s == 1.0 {
        return Ok(cond.clone());
    }
    if s == 0.0 {
        return Ok(uncond.clone());
    }
    uncond.zip_map(cond, |u, c| u + s * (c - u))
}

/// Below this temperature sampling is greedy.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// One categorical draw per logits row. Exactly one uniform is consumed per
/// row whatever the settings, so streams stay aligned.
pub fn sample_tokens(
    logits: &Tensor,
    temperature: f64,
    top_k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature {temperature} must be > 0")));
    }
    let v = logits.cols();
    let mut out = Vec::with_capacity(logits.rows());
    let mut order: Vec<usize> = Vec::with_capacity(v);
    let mut probs = vec![0.0; v];
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let u: f64 = rng.gen();
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite logits in row {r}")));
        }
        if temperature < GREEDY_TEMPERATURE || top_k == 1 {
            out.push(argmax(row));
            continue;
        }
        order.clear();
        order.extend(0..v);
        let keep = if top_k == 0 || top_k >= v {
            v
        } else {
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            top_k
        };
        let kept = &order[..keep];
        let max = kept.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        probs.iter_mut().for_each(|p| *p = 0.0);
        let mut total = 0.0;
        for &i in kept {
            let e = ((row[i] - max) / temperature).exp();
            probs[i] = e;
            total += e;
        }
        let mut target = u * total;
        let mut pick = *kept.iter().max().expect("non-empty vocabulary");
        for i in 0..v {
            if probs[i] > 0.0 {
                if target < probs[i] {
                    pick = i;
                    break;
                }
                target -= probs[i];
            }
        }
        out.push(pick);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Addresses one attention layer of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerId {
    Pre(usize),
    Implicit,
    Post(usize),
}

/// Keys and values of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct KvSegment {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Per-layer key/value history of one generation stream.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheStore {
    dim: usize,
    pre: Vec<KvSegment>,
    post: Vec<KvSegment>,
    /// Iteration index → segments of the scales that ran that iteration,
    /// keyed by scale.
    implicit: BTreeMap<usize, BTreeMap<usize, KvSegment>>,
    /// Iterations executed by each committed scale.
    executed: Vec<usize>,
    rows: Vec<usize>,
}

fn empty(dim: usize) -> KvSegment {
    KvSegment {
        keys: Tensor::zeros(&[0, dim]),
        values: Tensor::zeros(&[0, dim]),
    }
}

fn append(seg: &mut KvSegment, keys: &Tensor, values: &Tensor) -> Result<()> {
    seg.keys = Tensor::concat_rows(&[&seg.keys, keys])?;
    seg.values = Tensor::concat_rows(&[&seg.values, values])?;
    Ok(())
}

/// Fresh keys/values of one scale, ready to commit.
#[derive(Clone, Debug, Default)]
pub struct ScaleKv {
    pub pre: Vec<(Tensor, Tensor)>,
    /// Entry `t − 1` holds iteration `t`.
    pub implicit: Vec<(Tensor, Tensor)>,
    pub post: Vec<(Tensor, Tensor)>,
}

impl KvCacheStore {
    pub fn new(dim: usize, pre_layers: usize, post_layers: usize) -> Self {
        Self {
            dim,
            pre: vec![empty(dim); pre_layers],
            post: vec![empty(dim); post_layers],
            implicit: BTreeMap::new(),
            executed: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.shape.dim, model.pre.len(), model.post.len())
    }

    /// Number of committed scales.
    pub fn scales(&self) -> usize {
        self.executed.len()
    }

    pub fn executed(&self) -> &[usize] {
        &self.executed
    }

    /// Iteration indices present in the implicit layer's store.
    pub fn iteration_keys(&self) -> Vec<usize> {
        self.implicit.keys().copied().collect()
    }

    pub fn cached_rows(&self) -> usize {
        self.rows.iter().sum()
    }

    /// Key/value prefix visible to `layer` at iteration `t` (ignored by
    /// explicit layers).
    pub fn kv_lookup(&self, layer: LayerId, t: usize) -> Result<KvSegment> {
        match layer {
            LayerId::Pre(l) => self.pre.get(l).cloned().ok_or_else(|| {
                Error::Cache(format!("no pre-stack layer {l} (have {})", self.pre.len()))
            }),
            LayerId::Post(l) => self.post.get(l).cloned().ok_or_else(|| {
                Error::Cache(format!("no post-stack layer {l} (have {})", self.post.len()))
            }),
            LayerId::Implicit => {
                if t == 0 {
                    return Err(Error::Cache("iteration indices start at 1".into()));
                }
                let mut keys = Vec::new();
                let mut values = Vec::new();
                for (scale, &ran) in self.executed.iter().enumerate() {
                    let at = t.min(ran);
                    let seg = self
                        .implicit
                        .get(&at)
                        .and_then(|e| e.get(&scale))
                        .ok_or_else(|| {
                            Error::Cache(format!("scale {scale} has no entry for iteration {at}"))
                        })?;
                    keys.push(&seg.keys);
                    values.push(&seg.values);
                }
                if keys.is_empty() {
                    return Ok(empty(self.dim));
                }
                Ok(KvSegment {
                    keys: Tensor::concat_rows(&keys)?,
                    values: Tensor::concat_rows(&values)?,
                })
            }
        }
    }

    /// Appends one finished scale to every layer.
    pub fn commit_scale(&mut self, kv: ScaleKv) -> Result<()> {
        if kv.pre.len() != self.pre.len() || kv.post.len() != self.post.len() {
            return Err(Error::Cache(format!(
                "scale carries {}+{} explicit layers, store has {}+{}",
                kv.pre.len(),
                kv.post.len(),
                self.pre.len(),
                self.post.len()
            )));
        }
        if kv.implicit.is_empty() {
            return Err(Error::Cache("a scale must run at least one iteration".into()));
        }
        let rows = kv.implicit[0].0.rows();
        let all = kv.pre.iter().chain(&kv.implicit).chain(&kv.post);
        for (k, v) in all {
            if k.rows() != rows || v.rows() != rows || k.cols() != self.dim || v.cols() != self.dim {
                return Err(Error::Cache(format!(
                    "inconsistent segment {:?}/{:?} for {rows} rows of width {}",
                    k.shape(),
                    v.shape(),
                    self.dim
                )));
            }
        }
        let scale = self.executed.len();
        for (seg, (k, v)) in self.pre.iter_mut().zip(&kv.pre) {
            append(seg, k, v)?;
        }
        for (seg, (k, v)) in self.post.iter_mut().zip(&kv.post) {
            append(seg, k, v)?;
        }
        for (i, (k, v)) in kv.implicit.into_iter().enumerate() {
            self.implicit.entry(i + 1).or_default().insert(
                scale,
                KvSegment {
                    keys: k,
                    values: v,
                },
            );
        }
        self.executed.push(self.implicit.iter().filter(|(_, e)| e.contains_key(&scale)).count());
        self.rows.push(rows);
        Ok(())
    }
}

/// How coarser scales are made visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CacheMode {
    /// Incremental: coarser scales come from the key/value cache.
    #[default]
    Cached,
    /// Reference: the whole prefix is recomputed under the block-causal
    /// mask, iterating every scale jointly.
    Recompute,
}

/// Result of one scale's forward pass.
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    /// `n_k² × V`.
    pub logits: Tensor,
    pub trace: IterationTrace,
    /// Equilibrium steps actually executed.
    pub steps: usize,
    /// Transformer-block executions.
    pub blocks: usize,
}

fn scale_inputs(
    model: &Model,
    book: &CodeBook,
    tokens: &TokenHierarchy,
    label: usize,
    scales: Range<usize>,
) -> Result<(Tensor, Tensor)> {
    let h = &model.shape.hierarchy;
    let mut g = Eager::new(&model.params);
    let sample = EmbedSample { label, tokens };
    let rows: usize = scales.clone().map(|k| h.tokens_at(k)).sum();
    let e = model.embed.embed(&mut g, book, h, &[sample], scales)?;
    let c = model.embed.cond.rows(&mut g, &[label], rows)?;
    Ok((e, c))
}

/// Logits of scale `k` given the grids of every coarser scale, reading and
/// extending `cache`.
pub fn infer_scale(
    model: &Model,
    book: &CodeBook,
    tokens: &TokenHierarchy,
    label: usize,
    k: usize,
    solver: &EquilibriumConfig,
    cache: &mut KvCacheStore,
) -> Result<ScaleOutput> {
    if cache.scales() != k {
        return Err(Error::Cache(format!(
            "cache holds {} scales, inferring scale {k}",
            cache.scales()
        )));
    }
    let expected: usize = (0..k).map(|j| model.shape.hierarchy.tokens_at(j)).sum();
    if cache.cached_rows() != expected {
        return Err(Error::Cache(format!(
            "cache holds {} rows, scales before {k} have {expected}",
            cache.cached_rows()
        )));
    }
    let (e, cond) = scale_inputs(model, book, tokens, label, k..k + 1)?;
    let mut g = Eager::new(&model.params);
    let mut fresh = ScaleKv::default();

    let pre: Vec<(Tensor, Tensor)> = (0..model.pre.len())
        .map(|l| cache.kv_lookup(LayerId::Pre(l), 0).map(|s| (s.keys, s.values)))
        .collect::<Result<_>>()?;
    let ctx = AttnContext::cached(None);
    let x = run_stack(&mut g, &model.pre, &e, &cond, &ctx, Some(&mut fresh.pre), Some(&pre))?;

    let x_inj = x.clone();
    let mut implicit_kv = Vec::new();
    let state = solve_fixed_point(EquilibriumState::warm_start(x), solver, |z, t| {
        let prefix = cache.kv_lookup(LayerId::Implicit, t)?;
        let ctx = AttnContext::cached(Some((&prefix.keys, &prefix.values)));
        let mut g = Eager::new(&model.params);
        let out = model.implicit.step(&mut g, z, &x_inj, &cond, &ctx)?;
        implicit_kv.push((out.keys, out.values));
        Ok(out.out)
    })?;
    fresh.implicit = implicit_kv;
    let steps = state.trace.steps();

    let post: Vec<(Tensor, Tensor)> = (0..model.post.len())
        .map(|l| cache.kv_lookup(LayerId::Post(l), 0).map(|s| (s.keys, s.values)))
        .collect::<Result<_>>()?;
    let hidden = run_stack(
        &mut g,
        &model.post,
        &state.z,
        &cond,
        &ctx,
        Some(&mut fresh.post),
        Some(&post),
    )?;
    let logits = model.head.forward(&mut g, &hidden)?;
    cache.commit_scale(fresh)?;
    Ok(ScaleOutput {
        logits,
        trace: state.trace,
        steps,
        blocks: model.pre.len() + steps + model.post.len(),
    })
}

/// Cache-free reference for scale `k`: recomputes scales `0..=k` as one
/// block-causal sequence and iterates them jointly.
pub fn infer_scale_recompute(
    model: &Model,
    book: &CodeBook,
    tokens: &TokenHierarchy,
    label: usize,
    k: usize,
    solver: &EquilibriumConfig,
) -> Result<ScaleOutput> {
    let h = model.shape.hierarchy.truncated(k + 1)?;
    let (e, cond) = scale_inputs(model, book, tokens, label, 0..k + 1)?;
    let mask = build_mask(&h);
    let ctx = AttnContext::masked(mask.tensor(), 1);
    let mut g = Eager::new(&model.params);
    let x = run_stack(&mut g, &model.pre, &e, &cond, &ctx, None, None)?;
    let x_inj = x.clone();
    let state = solve_fixed_point(EquilibriumState::warm_start(x), solver, |z, _| {
        let mut g = Eager::new(&model.params);
        Ok(model.implicit.step(&mut g, z, &x_inj, &cond, &ctx)?.out)
    })?;
    let steps = state.trace.steps();
    let hidden = run_stack(&mut g, &model.post, &state.z, &cond, &ctx, None, None)?;
    let logits = model.head.forward(&mut g, &hidden)?;
    let start = h.offset(k);
    Ok(ScaleOutput {
        logits: logits.slice_rows(start, start + h.tokens_at(k))?,
        trace: state.trace,
        steps,
        blocks: model.pre.len() + steps + model.post.len(),
    })
}

/// Masked editing request.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSpec {
    /// Per-scale row-major grids; `true` marks positions to generate.
    pub mask: Vec<Vec<bool>>,
    pub reference: TokenHierarchy,
    /// Class used instead of the requested one (class-conditional editing).
    pub class_override: Option<usize>,
}

impl EditSpec {
    /// Mask that generates everything inside the half-open pixel-space box
    /// `[y0, y1) × [x0, x1)` of the unit square, at every scale.
    pub fn boxed(
        reference: TokenHierarchy,
        resolutions: &[usize],
        y: (f64, f64),
        x: (f64, f64),
        class_override: Option<usize>,
    ) -> Self {
        let mask = resolutions
            .iter()
            .map(|&n| {
                (0..n * n)
                    .map(|i| {
                        let cy = ((i / n) as f64 + 0.5) / n as f64;
                        let cx = ((i % n) as f64 + 0.5) / n as f64;
                        cy >= y.0 && cy < y.1 && cx >= x.0 && cx < x.1
                    })
                    .collect()
            })
            .collect();
        Self {
            mask,
            reference,
            class_override,
        }
    }

    pub fn validate(&self, resolutions: &[usize], vocab: usize) -> Result<()> {
        if self.mask.len() != resolutions.len() {
            return Err(Error::Spec(format!(
                "edit mask has {} scales, hierarchy has {}",
                self.mask.len(),
                resolutions.len()
            )));
        }
        for (k, (m, &n)) in self.mask.iter().zip(resolutions).enumerate() {
            if m.len() != n * n {
                return Err(Error::Spec(format!(
                    "edit mask at scale {k} has {} cells, expected {}",
                    m.len(),
                    n * n
                )));
            }
        }
        let h = crate::tokenizer::ScaleHierarchy::new(resolutions.to_vec())?;
        self.reference
            .validate(&h, vocab)
            .map_err(|e| Error::Spec(format!("reference tokens: {e}")))
    }
}

/// Options beyond schedule and guidance.
#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    pub mode: CacheMode,
    /// Keep every iterate in the traces.
    pub probe: bool,
    pub edit: Option<EditSpec>,
}

/// Output of one generation.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: TokenHierarchy,
    pub image: Image,
    pub label: usize,
    /// Guided logits of every scale, before sampling.
    pub logits: Vec<Tensor>,
    /// Solver traces of the primary stream (conditional unless `s = 0`).
    pub traces: Vec<IterationTrace>,
    /// Equilibrium steps per scale in the primary stream.
    pub steps: Vec<usize>,
    /// Block executions per scale in the primary stream.
    pub blocks: Vec<usize>,
    /// Block executions summed over every stream.
    pub blocks_all_streams: usize,
}

impl Generation {
    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }
}

struct Stream {
    label: usize,
    cache: KvCacheStore,
}

impl Stream {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        model: &Model,
        book: &CodeBook,
        tokens: &TokenHierarchy,
        k: usize,
        solver: &EquilibriumConfig,
        mode: CacheMode,
    ) -> Result<ScaleOutput> {
        match mode {
            CacheMode::Cached => infer_scale(model, book, tokens, self.label, k, solver, &mut self.cache),
            CacheMode::Recompute => infer_scale_recompute(model, book, tokens, self.label, k, solver),
        }
    }
}

/// Samples a full hierarchy for `label` and decodes it.
pub fn generate(
    model: &Model,
    tokenizer: &Tokenizer,
    label: usize,
    schedule: &IterSchedule,
    guidance: &GuidanceConfig,
    opts: &GenerateOptions,
) -> Result<Generation> {
    guidance.validate()?;
    let h = &model.shape.hierarchy;
    if tokenizer.hierarchy != *h {
        return Err(Error::Spec("tokenizer and model hierarchies differ".into()));
    }
    if schedule.scales() != h.len() {
        return Err(Error::Spec(format!(
            "schedule covers {} scales, hierarchy has {}",
            schedule.scales(),
            h.len()
        )));
    }
    if let Some(edit) = &opts.edit {
        edit.validate(h.resolutions(), model.shape.vocab)?;
    }
    let label = opts
        .edit
        .as_ref()
        .and_then(|e| e.class_override)
        .unwrap_or(label);
    if label >= model.shape.classes {
        return Err(Error::Spec(format!(
            "class {label} outside 0..{}",
            model.shape.classes
        )));
    }
    let s = guidance.scale;
    let mut cond = (s != 0.0).then(|| Stream {
        label,
        cache: KvCacheStore::for_model(model),
    });
    let mut uncond = (s != 1.0).then(|| Stream {
        label: model.embed.cond.null(),
        cache: KvCacheStore::for_model(model),
    });
    let mut rng: ChaCha8Rng = rng::substream(guidance.seed, streams::SAMPLING);
    let mut tokens = TokenHierarchy::new(Vec::new());
    let mut out = Generation {
        tokens: TokenHierarchy::new(Vec::new()),
        image: Image::zeros(1, 1, 1),
        label,
        logits: Vec::new(),
        traces: Vec::new(),
        steps: Vec::new(),
        blocks: Vec::new(),
        blocks_all_streams: 0,
    };
    for k in 0..h.len() {
        let solver = schedule.solver(k).with_probe(opts.probe);
        let c = match cond.as_mut() {
            Some(st) => Some(st.run(model, &tokenizer.book, &tokens, k, &solver, opts.mode)?),
            None => None,
        };
        let u = match uncond.as_mut() {
            Some(st) => Some(st.run(model, &tokenizer.book, &tokens, k, &solver, opts.mode)?),
            None => None,
        };
        out.blocks_all_streams += c.as_ref().map_or(0, |o| o.blocks) + u.as_ref().map_or(0, |o| o.blocks);
        let (logits, primary) = match (c, u) {
            (Some(c), Some(u)) => (apply_guidance(&c.logits, &u.logits, s)?, c),
            (Some(c), None) => (c.logits.clone(), c),
            (None, Some(u)) => (u.logits.clone(), u),
            (None, None) => unreachable!("at least one stream runs"),
        };
        let mut drawn = sample_tokens(&logits, guidance.temperature, guidance.top_k, &mut rng)?;
        if let Some(edit) = &opts.edit {
            let reference = edit.reference.grid(k).indices();
            for (i, keep) in edit.mask[k].iter().enumerate() {
                if !keep {
                    drawn[i] = reference[i];
                }
            }
        }
        tokens.push(TokenGrid::new(h.side(k), drawn)?);
        out.logits.push(logits);
        out.steps.push(primary.steps);
        out.blocks.push(primary.blocks);
        out.traces.push(primary.trace);
    }
    out.image = tokenizer.decode(&tokens)?;
    out.tokens = tokens;
    Ok(out)
}

/// Regenerates the masked region of `edit.reference`; every mask-false
/// position keeps its reference token at every scale.
pub fn inpaint(
    model: &Model,
    tokenizer: &Tokenizer,
    label: usize,
    edit: &EditSpec,
    schedule: &IterSchedule,
    guidance: &GuidanceConfig,
) -> Result<Generation> {
    let opts = GenerateOptions {
        edit: Some(edit.clone()),
        ..GenerateOptions::default()
    };
    generate(model, tokenizer, label, schedule, guidance, &opts)
}

/// Grid-searches a shared adaptive threshold whose mean executed step
/// count `Σ c_k` over `labels` is closest to `target_steps`.
///
/// Returns `(tau, mean steps)`.
pub fn calibrate_threshold(
    model: &Model,
    tokenizer: &Tokenizer,
    labels: &[usize],
    cap: usize,
    candidates: &[f64],
    target_steps: f64,
    guidance: &GuidanceConfig,
) -> Result<(f64, f64)> {
    if candidates.is_empty() || labels.is_empty() {
        return Err(Error::Contract("calibration needs candidates and labels".into()));
    }
    let scales = model.shape.hierarchy.len();
    let mut best: Option<(f64, f64)> = None;
    for &tau in candidates {
        let sched = IterSchedule::adaptive(vec![tau; scales], cap)?;
        let mut total = 0usize;
        for &l in labels {
            let g = generate(model, tokenizer, l, &sched, guidance, &GenerateOptions::default())?;
            total += g.steps.iter().sum::<usize>();
        }
        let mean = total as f64 / labels.len() as f64;
        let better = match best {
            None => true,
            Some((_, m)) => (mean - target_steps).abs() < (m - target_steps).abs(),
        };
        if better {
            best = Some((tau, mean));
        }
    }
    Ok(best.expect("non-empty candidates"))
}
