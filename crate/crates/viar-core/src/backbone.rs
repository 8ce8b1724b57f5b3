//! Block-causal transformer pieces: masks, pre-norm blocks, the
//! previous-scale embedding, explicit stacks, and the logits head.

use std::ops::Range;

use rand::Rng;
use rand_distr_free::normal;

use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, Graph, ParamId, ParamStore, Tensor};
use crate::tokenizer::{CodeBook, ScaleHierarchy, TokenHierarchy};

/// Small helpers for parameter initialization without an extra dependency.
mod rand_distr_free {
    use rand::Rng;

    /// Box–Muller standard normal draw.
    pub fn normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

pub(crate) fn init_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Additive `T×T` mask over the concatenated sequence: entry `(i, j)` is 0
/// when `scale(j) ≤ scale(i)` and `−∞` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCausalMask {
    mask: Tensor,
}

impl BlockCausalMask {
    pub fn new(hierarchy: &ScaleHierarchy) -> Self {
        let scales = hierarchy.scale_of_positions();
        let t = scales.len();
        let mut data = vec![0.0; t * t];
        for (i, &si) in scales.iter().enumerate() {
            for (j, &sj) in scales.iter().enumerate() {
                if sj > si {
                    data[i * t + j] = f64::NEG_INFINITY;
                }
            }
        }
        Self {
            mask: Tensor::from_parts(vec![t, t], data),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.numel() == 0
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.mask.get(row, col) == 0.0
    }
}

pub fn build_mask(hierarchy: &ScaleHierarchy) -> BlockCausalMask {
    BlockCausalMask::new(hierarchy)
}

/// Parameter handles of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub heads: usize,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = 4 * dim;
        let mut w = |name: &str, shape: &[usize], s: f64, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), init_normal(rng, shape, s))
        };
        let wq = w("attn.q", &[dim, dim], std, rng);
        let wk = w("attn.k", &[dim, dim], std, rng);
        let wv = w("attn.v", &[dim, dim], std, rng);
        let wo = w("attn.o", &[dim, dim], std, rng);
        let ffn_in = w("ffn.in", &[dim, hidden], std, rng);
        let ffn_out = w("ffn.out", &[hidden, dim], std, rng);
        Ok(Self {
            ln1_gain: store.add(format!("{prefix}.ln1.gain"), Tensor::full(&[dim], 1.0)),
            ln1_bias: store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[dim])),
            wq,
            wk,
            wv,
            wo,
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::full(&[dim], 1.0)),
            ln2_bias: store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[dim])),
            ffn_in,
            ffn_in_bias: store.add(format!("{prefix}.ffn.in_bias"), Tensor::zeros(&[hidden])),
            ffn_out,
            ffn_out_bias: store.add(format!("{prefix}.ffn.out_bias"), Tensor::zeros(&[dim])),
            heads,
        })
    }

    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_in,
            self.ffn_in_bias,
            self.ffn_out,
            self.ffn_out_bias,
        ]
    }

    /// Scalar parameter count of one block of width `dim`.
    pub fn count(dim: usize) -> usize {
        4 * dim * dim + 2 * 4 * dim * dim + 4 * dim + dim + 4 * dim
    }
}

/// Attention context for one block call.
#[derive(Clone, Copy, Default)]
pub struct AttnContext<'a> {
    pub mask: Option<&'a Tensor>,
    /// Cached keys and values placed before the fresh ones (batch of one).
    pub prefix: Option<(&'a Tensor, &'a Tensor)>,
    pub batch: usize,
}

impl<'a> AttnContext<'a> {
    pub fn masked(mask: &'a Tensor, batch: usize) -> Self {
        Self {
            mask: Some(mask),
            prefix: None,
            batch,
        }
    }

    pub fn cached(prefix: Option<(&'a Tensor, &'a Tensor)>) -> Self {
        Self {
            mask: None,
            prefix,
            batch: 1,
        }
    }
}

/// Block output together with the fresh keys/values it computed.
pub struct BlockOut<N> {
    pub out: N,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Multi-head attention sub-layer on an already-normalized input.
pub fn attention<G: Graph>(
    g: &mut G,
    p: &BlockParams,
    normed: &G::Node,
    ctx: &AttnContext,
) -> Result<BlockOut<G::Node>> {
    let wq = g.param(p.wq);
    let wk = g.param(p.wk);
    let wv = g.param(p.wv);
    let wo = g.param(p.wo);
    let q = g.matmul(normed, &wq)?;
    let k = g.matmul(normed, &wk)?;
    let v = g.matmul(normed, &wv)?;
    let keys = g.value(&k).clone();
    let values = g.value(&v).clone();
    let (k_all, v_all) = match ctx.prefix {
        Some((pk, pv)) if pk.numel() > 0 => {
            if pk.cols() != keys.cols() || pv.shape() != pk.shape() || ctx.batch != 1 {
                return Err(Error::Cache(format!(
                    "cached prefix {:?} does not fit keys {:?}",
                    pk.shape(),
                    keys.shape()
                )));
            }
            let ck = g.constant(pk.clone());
            let cv = g.constant(pv.clone());
            (g.concat_rows(&ck, &k)?, g.concat_rows(&cv, &v)?)
        }
        _ => (k, v),
    };
    let spec = AttentionSpec {
        heads: p.heads,
        batch: ctx.batch.max(1),
        mask: ctx.mask.cloned(),
    };
    let a = g.attention(&q, &k_all, &v_all, &spec)?;
    let out = g.matmul(&a, &wo)?;
    Ok(BlockOut { out, keys, values })
}

/// `h = x + Attn(LN1(x + c))`, then `h + FFN(LN2(h))`.
///
/// `cond` holds one condition row per input row.
pub fn transformer_block<G: Graph>(
    g: &mut G,
    p: &BlockParams,
    x: &G::Node,
    cond: &G::Node,
    ctx: &AttnContext,
) -> Result<BlockOut<G::Node>> {
    let ln1g = g.param(p.ln1_gain);
    let ln1b = g.param(p.ln1_bias);
    let u = g.add(x, cond)?;
    let normed = g.layer_norm(&u, &ln1g, &ln1b)?;
    let att = attention(g, p, &normed, ctx)?;
    let h = g.add(x, &att.out)?;
    let ln2g = g.param(p.ln2_gain);
    let ln2b = g.param(p.ln2_bias);
    let n2 = g.layer_norm(&h, &ln2g, &ln2b)?;
    let w1 = g.param(p.ffn_in);
    let b1 = g.param(p.ffn_in_bias);
    let w2 = g.param(p.ffn_out);
    let b2 = g.param(p.ffn_out_bias);
    let f = g.matmul(&n2, &w1)?;
    let f = g.add_bias(&f, &b1)?;
    let f = g.gelu(&f);
    let f = g.matmul(&f, &w2)?;
    let f = g.add_bias(&f, &b2)?;
    let out = g.add(&h, &f)?;
    Ok(BlockOut {
        out,
        keys: att.keys,
        values: att.values,
    })
}

/// Sequential composition of explicit blocks.
///
/// `caches`, when given, holds one `(keys, values)` prefix per block and
/// receives each block's fresh keys/values.
pub fn run_stack<G: Graph>(
    g: &mut G,
    blocks: &[BlockParams],
    x: &G::Node,
    cond: &G::Node,
    ctx: &AttnContext,
    mut fresh: Option<&mut Vec<(Tensor, Tensor)>>,
    prefixes: Option<&[(Tensor, Tensor)]>,
) -> Result<G::Node> {
    let mut h = x.clone();
    for (i, b) in blocks.iter().enumerate() {
        let mut c = *ctx;
        if let Some(p) = prefixes {
            c.prefix = p.get(i).map(|(k, v)| (k, v));
        }
        let out = transformer_block(g, b, &h, cond, &c)?;
        if let Some(f) = fresh.as_deref_mut() {
            f.push((out.keys, out.values));
        }
        h = out.out;
    }
    Ok(h)
}

/// Class-condition table with a trailing null row for guidance dropout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionEmbedding {
    pub table: ParamId,
    pub classes: usize,
}

impl ConditionEmbedding {
    pub fn null(&self) -> usize {
        self.classes
    }

    /// One condition row per token: `labels[b]` repeated `len` times.
    pub fn rows<G: Graph>(&self, g: &mut G, labels: &[usize], len: usize) -> Result<G::Node> {
        let idx: Vec<usize> = labels
            .iter()
            .flat_map(|&l| std::iter::repeat(l).take(len))
            .collect();
        let t = g.param(self.table);
        g.gather_rows(&t, &idx)
    }
}

/// Learned position table over every `(scale, row, col)` plus a per-scale
/// level embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionalTable {
    pub positions: ParamId,
    pub levels: ParamId,
}

/// Parameters that turn tokens into block inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputEmbedding {
    pub cond: ConditionEmbedding,
    pub word: ParamId,
    pub word_bias: ParamId,
    pub pos: PositionalTable,
}

/// One sequence to embed: its condition row and the tokens of the scales
/// preceding the embedded range.
#[derive(Clone, Copy)]
pub struct EmbedSample<'a> {
    pub label: usize,
    pub tokens: &'a TokenHierarchy,
}

/// Output-cell to source-cell map of nearest-neighbor upsampling from a
/// `src×src` grid to `dst×dst`.
pub fn upsample_index(src: usize, dst: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(dst * dst);
    for i in 0..dst {
        for j in 0..dst {
            idx.push((i * src / dst) * src + j * src / dst);
        }
    }
    idx
}

impl InputEmbedding {
    /// Embeds the inputs of `scales` for every sample, rows ordered by sample
    /// then scale. Scale 0 is the condition-derived start token; scale `k > 0`
    /// embeds grid `k − 1` through the code book, upsamples it, and adds
    /// positional and level terms.
    pub fn embed<G: Graph>(
        &self,
        g: &mut G,
        book: &CodeBook,
        hierarchy: &ScaleHierarchy,
        samples: &[EmbedSample],
        scales: Range<usize>,
    ) -> Result<G::Node> {
        if scales.end > hierarchy.len() || scales.is_empty() {
            return Err(Error::Range(format!(
                "scales {scales:?} outside hierarchy of {}",
                hierarchy.len()
            )));
        }
        let b = samples.len();
        let mut codes: Vec<usize> = Vec::new();
        let mut rows: Vec<usize> = Vec::new();
        let mut pos: Vec<usize> = Vec::new();
        let mut lvl: Vec<usize> = Vec::new();
        for (si, s) in samples.iter().enumerate() {
            for k in scales.clone() {
                let n = hierarchy.side(k);
                let off = hierarchy.offset(k);
                pos.extend(off..off + n * n);
                lvl.extend(std::iter::repeat(k).take(n * n));
                if k == 0 {
                    rows.extend(std::iter::repeat(si).take(n * n));
                    continue;
                }
                let prev = s.tokens.grids().get(k - 1).ok_or_else(|| {
                    Error::Spec(format!("scale {k} needs the grid of scale {}", k - 1))
                })?;
                if prev.side() != hierarchy.side(k - 1) {
                    return Err(Error::shape(
                        "embed",
                        &[prev.side()],
                        &[hierarchy.side(k - 1)],
                    ));
                }
                let base = b + codes.len();
                codes.extend_from_slice(prev.indices());
                rows.extend(upsample_index(prev.side(), n).into_iter().map(|i| base + i));
            }
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let ct = g.param(self.cond.table);
        let mut table = g.gather_rows(&ct, &labels)?;
        if !codes.is_empty() {
            let mut data = Vec::with_capacity(codes.len() * book.width());
            for &c in &codes {
                data.extend_from_slice(book.code(c)?);
            }
            let vecs = g.constant(Tensor::matrix(codes.len(), book.width(), data)?);
            let w = g.param(self.word);
            let wb = g.param(self.word_bias);
            let proj = g.matmul(&vecs, &w)?;
            let proj = g.add_bias(&proj, &wb)?;
            table = g.concat_rows(&table, &proj)?;
        }
        let x = g.gather_rows(&table, &rows)?;
        let pt = g.param(self.pos.positions);
        let p = g.gather_rows(&pt, &pos)?;
        let lt = g.param(self.pos.levels);
        let l = g.gather_rows(&lt, &lvl)?;
        let x = g.add(&x, &p)?;
        g.add(&x, &l)
    }
}

/// Linear logits head, `dim × vocab` plus bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogitsHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LogitsHead {
    pub fn forward<G: Graph>(&self, g: &mut G, hidden: &G::Node) -> Result<G::Node> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let l = g.matmul(hidden, &w)?;
        g.add_bias(&l, &b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Eager, Tape};
    use crate::tokenizer::TokenGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn single_scale_mask_is_open() {
        let m = build_mask(&ScaleHierarchy::new(vec![3]).unwrap());
        assert!(m.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_scale_mask_by_enumeration() {
        let m = build_mask(&ScaleHierarchy::new(vec![1, 2]).unwrap());
        assert_eq!(m.len(), 5);
        let scale = |p: usize| usize::from(p >= 1);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allows(i, j), scale(j) <= scale(i), "({i},{j})");
            }
        }
        assert!((1..5).all(|j| !m.allows(0, j)));
        assert!((0..5).all(|j| m.allows(3, j)));
    }

    #[test]
    fn mask_is_constant_within_blocks() {
        let h = ScaleHierarchy::new(vec![1, 2, 3]).unwrap();
        let m = build_mask(&h);
        let s = h.scale_of_positions();
        for i in 0..s.len() {
            for j in 0..s.len() {
                for i2 in (0..s.len()).filter(|&a| s[a] == s[i]) {
                    for j2 in (0..s.len()).filter(|&a| s[a] == s[j]) {
                        assert_eq!(m.allows(i, j), m.allows(i2, j2));
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_layout_matches_index_arithmetic() {
        assert_eq!(upsample_index(1, 2), vec![0, 0, 0, 0]);
        let idx = upsample_index(2, 4);
        for r in 0..4 {
            for c in 0..4 {
                let (sr, sc) = (r / 2, c / 2);
                assert_eq!(idx[r * 4 + c], sr * 2 + sc);
            }
        }
    }

    fn zero_block(store: &mut ParamStore, dim: usize) -> BlockParams {
        BlockParams::init(store, "z", dim, 2, 0.0, &mut rng()).unwrap()
    }

    #[test]
    fn zero_block_is_identity() {
        let mut store = ParamStore::new();
        let p = zero_block(&mut store, 4);
        let mut g = Eager::new(&store);
        let x = crate::backbone::init_normal(&mut rng(), &[3, 4], 1.0);
        let c = crate::backbone::init_normal(&mut rng(), &[3, 4], 1.0);
        let y = transformer_block(&mut g, &p, &x, &c, &AttnContext::default()).unwrap();
        assert_eq!(y.out, x);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut store = ParamStore::new();
        let p = BlockParams::init(&mut store, "b", 4, 2, 0.5, &mut rng()).unwrap();
        let mut g = Eager::new(&store);
        let x = init_normal(&mut rng(), &[1, 4], 1.0);
        let out = attention(&mut g, &p, &x, &AttnContext::default()).unwrap();
        let v = crate::tensor::kernels::matmul(x.data(), store.get(p.wv).data(), 1, 4, 4);
        let want = crate::tensor::kernels::matmul(&v, store.get(p.wo).data(), 1, 4, 4);
        for (a, b) in out.out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_mask_gives_self_values() {
        let mut store = ParamStore::new();
        let p = BlockParams::init(&mut store, "b", 4, 2, 0.5, &mut rng()).unwrap();
        let mut g = Eager::new(&store);
        let x = init_normal(&mut rng(), &[3, 4], 1.0);
        let mut m = vec![f64::NEG_INFINITY; 9];
        for i in 0..3 {
            m[i * 3 + i] = 0.0;
        }
        let mask = Tensor::matrix(3, 3, m).unwrap();
        let out = attention(&mut g, &p, &x, &AttnContext::masked(&mask, 1)).unwrap();
        let v = crate::tensor::kernels::matmul(x.data(), store.get(p.wv).data(), 3, 4, 4);
        let want = crate::tensor::kernels::matmul(&v, store.get(p.wo).data(), 3, 4, 4);
        for (a, b) in out.out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn stack_depths_compose() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let b1 = BlockParams::init(&mut store, "s0", 8, 2, 0.1, &mut r).unwrap();
        let b2 = BlockParams::init(&mut store, "s1", 8, 2, 0.1, &mut r).unwrap();
        let x = init_normal(&mut r, &[5, 8], 1.0);
        let c = init_normal(&mut r, &[5, 8], 0.1);
        let mut g = Eager::new(&store);
        let ctx = AttnContext::default();
        let none = run_stack(&mut g, &[], &x, &c, &ctx, None, None).unwrap();
        assert_eq!(none, x);
        let one = run_stack(&mut g, &[b1.clone()], &x, &c, &ctx, None, None).unwrap();
        let manual1 = transformer_block(&mut g, &b1, &x, &c, &ctx).unwrap().out;
        assert!(one.bit_eq(&manual1));
        let two = run_stack(&mut g, &[b1.clone(), b2.clone()], &x, &c, &ctx, None, None).unwrap();
        let manual2 = transformer_block(&mut g, &b2, &manual1, &c, &ctx).unwrap().out;
        assert!(two.bit_eq(&manual2));
        assert_eq!(two.shape(), x.shape());
    }

    #[test]
    fn head_is_dense_product() {
        let mut store = ParamStore::new();
        let w = store.add("w", init_normal(&mut rng(), &[4, 6], 1.0));
        let b = store.add("b", Tensor::zeros(&[6]));
        let head = LogitsHead { weight: w, bias: b };
        let h = init_normal(&mut rng(), &[3, 4], 1.0);
        let mut g = Eager::new(&store);
        let out = head.forward(&mut g, &h).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        for r in 0..3 {
            for c in 0..6 {
                let want: f64 = (0..4).map(|k| h.get(r, k) * store.get(w).get(k, c)).sum();
                assert!((out.get(r, c) - want).abs() < 1e-12);
            }
        }
        let mut zero = ParamStore::new();
        let zw = zero.add("w", Tensor::zeros(&[4, 6]));
        let zb = zero.add("b", Tensor::zeros(&[6]));
        let mut g = Eager::new(&zero);
        let out = LogitsHead { weight: zw, bias: zb }.forward(&mut g, &h).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    fn embedding(store: &mut ParamStore, dim: usize, width: usize, h: &ScaleHierarchy) -> InputEmbedding {
        let mut r = rng();
        InputEmbedding {
            cond: ConditionEmbedding {
                table: store.add("cls", init_normal(&mut r, &[3, dim], 1.0)),
                classes: 2,
            },
            word: store.add("word", init_normal(&mut r, &[width, dim], 1.0)),
            word_bias: store.add("word_b", Tensor::zeros(&[dim])),
            pos: PositionalTable {
                positions: store.add("pos", init_normal(&mut r, &[h.total_tokens(), dim], 1.0)),
                levels: store.add("lvl", init_normal(&mut r, &[h.len(), dim], 1.0)),
            },
        }
    }

    #[test]
    fn first_scale_is_condition_plus_positions() {
        let h = ScaleHierarchy::new(vec![2, 4]).unwrap();
        let mut store = ParamStore::new();
        let e = embedding(&mut store, 4, 3, &h);
        let book = CodeBook::new(init_normal(&mut rng(), &[5, 3], 1.0)).unwrap();
        let tokens = TokenHierarchy::new(vec![]);
        let mut g = Eager::new(&store);
        let x = e
            .embed(&mut g, &book, &h, &[EmbedSample { label: 1, tokens: &tokens }], 0..1)
            .unwrap();
        assert_eq!(x.shape(), &[4, 4]);
        let cls = store.get(e.cond.table).row(1);
        let lvl = store.get(e.pos.levels).row(0);
        for r in 0..4 {
            let pos = store.get(e.pos.positions).row(r);
            for c in 0..4 {
                assert!((x.get(r, c) - (cls[c] + pos[c] + lvl[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_grid_replicates_before_positions() {
        let h = ScaleHierarchy::new(vec![1, 2]).unwrap();
        let mut store = ParamStore::new();
        let e = embedding(&mut store, 4, 3, &h);
        let book = CodeBook::new(init_normal(&mut rng(), &[5, 3], 1.0)).unwrap();
        let tokens = TokenHierarchy::new(vec![TokenGrid::new(1, vec![3]).unwrap()]);
        let mut g = Eager::new(&store);
        let x = e
            .embed(&mut g, &book, &h, &[EmbedSample { label: 0, tokens: &tokens }], 1..2)
            .unwrap();
        let lvl = store.get(e.pos.levels).row(1);
        let mut base = Vec::new();
        for r in 0..4 {
            let pos = store.get(e.pos.positions).row(1 + r);
            base.push((0..4).map(|c| x.get(r, c) - pos[c] - lvl[c]).collect::<Vec<_>>());
        }
        for r in 1..4 {
            for c in 0..4 {
                assert!((base[r][c] - base[0][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let p = BlockParams::init(&mut store, "b", 4, 2, 0.4, &mut r).unwrap();
        let x = init_normal(&mut r, &[3, 4], 1.0);
        let c = init_normal(&mut r, &[3, 4], 0.3);
        let proj = init_normal(&mut r, &[3, 4], 1.0);
        let loss_of = |store: &ParamStore| {
            let mut g = Eager::new(store);
            let y = transformer_block(&mut g, &p, &x, &c, &AttnContext::default()).unwrap().out;
            y.dot(&proj)
        };
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let y = transformer_block(&mut tape, &p, &xv, &cv, &AttnContext::default()).unwrap().out;
        let pv = tape.constant(proj.clone());
        let weighted = tape.mul(&y, &pv).unwrap();
        let loss = tape.sum(&weighted);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        let h = 1e-5;
        for id in p.ids() {
            let g = grads[id.index()].as_ref().unwrap();
            let base = store.get(id).clone();
            let mut fd = Vec::new();
            for i in 0..base.numel() {
                let mut s = store.clone();
                let mut v = base.to_vec();
                v[i] = base.data()[i] + h;
                s.set(id, Tensor::new(base.shape().to_vec(), v.clone()).unwrap());
                let lp = loss_of(&s);
                v[i] = base.data()[i] - h;
                s.set(id, Tensor::new(base.shape().to_vec(), v).unwrap());
                let lm = loss_of(&s);
                fd.push((lp - lm) / (2.0 * h));
            }
            let fd = Tensor::new(base.shape().to_vec(), fd).unwrap();
            let err = g.zip_map(&fd, |a, b| a - b).unwrap().norm();
            let scale = g.norm().max(fd.norm()).max(1e-8);
            assert!(err / scale < 1e-4, "{}: rel err {}", store.name(id), err / scale);
        }
    }
}
