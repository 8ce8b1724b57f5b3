//! The full network: input embedding, `p` explicit pre-blocks, the implicit
//! layer, `p` explicit post-blocks, and the logits head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    init_normal, BlockParams, ConditionEmbedding, InputEmbedding, LogitsHead, PositionalTable,
};
use crate::equilibrium::{FusionProjection, ImplicitLayer};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::ScaleHierarchy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Width of the code-book vectors fed to the input projection.
    pub code_width: usize,
    /// Blocks in each explicit stack.
    pub depth: usize,
    pub classes: usize,
    pub hierarchy: ScaleHierarchy,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab < 2 || self.code_width == 0 || self.classes == 0 {
            return Err(Error::Config(
                "vocab ≥ 2, code width ≥ 1, and classes ≥ 1 are required".into(),
            ));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.hierarchy.len()
    }
}

/// Initialization scales.
#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub std: f64,
    pub fusion_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            std: 0.02,
            fusion_std: 0.1,
        }
    }
}

/// Scalar parameter counts per architectural section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embedding: usize,
    pub pre: usize,
    pub implicit_block: usize,
    pub fusion: usize,
    pub post: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.embedding + self.pre + self.implicit_block + self.fusion + self.post + self.head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    pub params: ParamStore,
    pub embed: InputEmbedding,
    pub pre: Vec<BlockParams>,
    pub implicit: ImplicitLayer,
    pub post: Vec<BlockParams>,
    pub head: LogitsHead,
}

impl Model {
    pub fn new(shape: ModelShape, init: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let mut p = ParamStore::new();
        let embed = InputEmbedding {
            cond: ConditionEmbedding {
                table: p.add("embed.class", init_normal(rng, &[shape.classes + 1, d], init.std)),
                classes: shape.classes,
            },
            word: p.add("embed.word", init_normal(rng, &[shape.code_width, d], init.std)),
            word_bias: p.add("embed.word_bias", Tensor::zeros(&[d])),
            pos: PositionalTable {
                positions: p.add(
                    "embed.pos",
                    init_normal(rng, &[shape.hierarchy.total_tokens(), d], init.std),
                ),
                levels: p.add("embed.level", init_normal(rng, &[shape.scales(), d], init.std)),
            },
        };
        let pre = (0..shape.depth)
            .map(|i| BlockParams::init(&mut p, &format!("pre.{i}"), d, shape.heads, init.std, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionProjection::init(&mut p, "implicit.fuse", d, init.fusion_std, rng);
        let block = BlockParams::init(&mut p, "implicit.block", d, shape.heads, init.std, rng)?;
        let post = (0..shape.depth)
            .map(|i| BlockParams::init(&mut p, &format!("post.{i}"), d, shape.heads, init.std, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = LogitsHead {
            weight: p.add("head.weight", init_normal(rng, &[d, shape.vocab], init.std)),
            bias: p.add("head.bias", Tensor::zeros(&[shape.vocab])),
        };
        let mut model = Self {
            shape,
            params: p,
            embed,
            pre,
            implicit: ImplicitLayer { fusion, block },
            post,
            head,
        };
        model.round_to_f32();
        Ok(model)
    }

    /// Builds the parameter layout for `shape` and fills it from `lookup`,
    /// which must supply every named tensor with the right shape.
    pub fn from_named(
        shape: ModelShape,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(shape, &InitConfig::default(), &mut rng)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = lookup(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, t);
        }
        Ok(model)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let sum = |ids: &mut dyn Iterator<Item = crate::tensor::ParamId>| -> usize {
            ids.map(|id| self.params.get(id).numel()).sum()
        };
        let e = &self.embed;
        ParamCounts {
            embedding: sum(&mut [e.cond.table, e.word, e.word_bias, e.pos.positions, e.pos.levels]
                .into_iter()),
            pre: sum(&mut self.pre.iter().flat_map(BlockParams::ids)),
            implicit_block: sum(&mut self.implicit.block.ids().into_iter()),
            fusion: sum(&mut self.implicit.fusion.ids().into_iter()),
            post: sum(&mut self.post.iter().flat_map(BlockParams::ids)),
            head: sum(&mut [self.head.weight, self.head.bias].into_iter()),
        }
    }

    /// Rounds every parameter to `f32` precision.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let r = self.params.get(id).round_to_f32();
            self.params.set(id, r);
        }
    }
}
