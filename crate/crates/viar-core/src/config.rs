//! Run configuration: TOML with dotted keys or sections.
//!
//! ```text
//! # comment
//! seed = 7
//! model.dim = 32
//! [train]
//! lr = 0.002                  # same as train.lr
//! [sample]
//! schedule = "dec:20,5"
//! ```
//!
//! Unknown keys are rejected, and the whole configuration is validated
//! before any command runs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::dataset::{DatasetConfig, TokenizerConfig};
use crate::error::{Error, Result};
use crate::model::{InitConfig, ModelShape};
use crate::sampler::GuidanceConfig;
use crate::schedule::{make_schedule, IterSchedule, ScheduleSpec};
use crate::tokenizer::ScaleHierarchy;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Explicit blocks before and after the implicit layer.
    pub depth: usize,
    pub resolutions: Vec<usize>,
    pub init_std: f64,
    pub fusion_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleConfig {
    pub schedule: ScheduleSpec,
    pub guidance: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub class: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub sample: SampleConfig,
    pub dataset: DatasetConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                dim: 32,
                heads: 2,
                depth: 1,
                resolutions: vec![1, 2, 4],
                init_std: 0.02,
                fusion_std: 0.1,
            },
            tokenizer: TokenizerConfig {
                patch: 4,
                width: 8,
                vocab: 32,
            },
            train: TrainConfig::default(),
            checkpoint_every: 0,
            sample: SampleConfig {
                schedule: ScheduleSpec::default(),
                guidance: 1.0,
                temperature: 1.0,
                top_k: 0,
                class: 0,
                count: 4,
            },
            dataset: DatasetConfig::default(),
            paths: Paths {
                data: "data".into(),
                checkpoint: "viar.ckpt".into(),
                out: "out".into(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect()
}

/// Dotted keys with scalar values rendered as text; arrays become
/// comma-separated lists.
fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    use toml::Value;
    let scalar = |v: &Value| match v {
        Value::String(s) => Some(s.clone()),
        Value::Integer(i) => Some(i.to_string()),
        Value::Float(f) => Some(f.to_string()),
        Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    };
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        Value::Array(a) => {
            let parts = a
                .iter()
                .map(|x| scalar(x).ok_or_else(|| Error::Config(format!("`{prefix}`: nested arrays unsupported"))))
                .collect::<Result<Vec<_>>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((
            prefix.to_string(),
            scalar(other).ok_or_else(|| Error::Config(format!("`{prefix}`: unsupported value")))?,
        )),
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut cfg = Self::default();
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        for (key, value) in flat {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.resolutions" => self.model.resolutions = parse_list(key, v)?,
            "model.init_std" => self.model.init_std = parse(key, v)?,
            "model.fusion_std" => self.model.fusion_std = parse(key, v)?,
            "tokenizer.patch" => self.tokenizer.patch = parse(key, v)?,
            "tokenizer.width" => self.tokenizer.width = parse(key, v)?,
            "tokenizer.vocab" => self.tokenizer.vocab = parse(key, v)?,
            "train.max_free" => self.train.max_free = parse(key, v)?,
            "train.max_grad" => self.train.max_grad = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.cond_dropout" => self.train.cond_dropout = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.warmup" => self.train.warmup = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "sample.schedule" => self.sample.schedule = v.parse().map_err(|e| Error::Config(format!("`{key}`: {e}")))?,
            "sample.cfg" => self.sample.guidance = parse(key, v)?,
            "sample.temperature" => self.sample.temperature = parse(key, v)?,
            "sample.top_k" => self.sample.top_k = parse(key, v)?,
            "sample.class" => self.sample.class = parse(key, v)?,
            "sample.count" => self.sample.count = parse(key, v)?,
            "dataset.per_class" => self.dataset.per_class = parse(key, v)?,
            "dataset.classes" => self.dataset.classes = parse(key, v)?,
            "dataset.size" => self.dataset.size = parse(key, v)?,
            "paths.data" => self.paths.data = v.into(),
            "paths.checkpoint" => self.paths.checkpoint = v.into(),
            "paths.out" => self.paths.out = v.into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn hierarchy(&self) -> Result<ScaleHierarchy> {
        ScaleHierarchy::new(self.model.resolutions.clone())
            .map_err(|e| Error::Config(format!("model.resolutions: {e}")))
    }

    pub fn model_shape(&self) -> Result<ModelShape> {
        Ok(ModelShape {
            dim: self.model.dim,
            heads: self.model.heads,
            vocab: self.tokenizer.vocab,
            code_width: self.tokenizer.width,
            depth: self.model.depth,
            classes: self.dataset.classes,
            hierarchy: self.hierarchy()?,
        })
    }

    pub fn init(&self) -> InitConfig {
        InitConfig {
            std: self.model.init_std,
            fusion_std: self.model.fusion_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            scale: self.sample.guidance,
            temperature: self.sample.temperature,
            top_k: self.sample.top_k,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<IterSchedule> {
        make_schedule(&self.sample.schedule, self.model.resolutions.len())
            .map_err(|e| Error::Config(format!("sample.schedule: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hierarchy()?;
        self.model_shape()?.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        self.guidance().validate()?;
        self.schedule()?;
        let t = &self.tokenizer;
        if t.patch == 0 || t.width == 0 || t.width > t.patch * t.patch {
            return Err(Error::Config(format!(
                "tokenizer.width {} must be in 1..={}",
                t.width,
                t.patch * t.patch
            )));
        }
        if t.vocab < 2 {
            return Err(Error::Config("tokenizer.vocab must be ≥ 2".into()));
        }
        if t.patch * h.finest() != self.dataset.size {
            return Err(Error::Config(format!(
                "tokenizer.patch {} × finest resolution {} must equal dataset.size {}",
                t.patch,
                h.finest(),
                self.dataset.size
            )));
        }
        if self.sample.class >= self.dataset.classes {
            return Err(Error::Config(format!(
                "sample.class {} outside 0..{}",
                self.sample.class, self.dataset.classes
            )));
        }
        if !self.model.init_std.is_finite() || !self.model.fusion_std.is_finite() {
            return Err(Error::Config("initialization scales must be finite".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in the accepted syntax.
    pub fn to_text(&self) -> String {
        let res: Vec<String> = self.model.resolutions.iter().map(usize::to_string).collect();
        let t = &self.train;
        let lines = [
            format!("seed = {}", self.seed),
            String::new(),
            "[model]".into(),
            format!("dim = {}", self.model.dim),
            format!("heads = {}", self.model.heads),
            format!("depth = {}", self.model.depth),
            format!("resolutions = [{}]", res.join(", ")),
            format!("init_std = {}", self.model.init_std),
            format!("fusion_std = {}", self.model.fusion_std),
            String::new(),
            "[tokenizer]".into(),
            format!("patch = {}", self.tokenizer.patch),
            format!("width = {}", self.tokenizer.width),
            format!("vocab = {}", self.tokenizer.vocab),
            String::new(),
            "[train]".into(),
            format!("max_free = {}", t.max_free),
            format!("max_grad = {}", t.max_grad),
            format!("lr = {}", t.lr),
            format!("beta1 = {}", t.beta1),
            format!("beta2 = {}", t.beta2),
            format!("eps = {}", t.eps),
            format!("weight_decay = {}", t.weight_decay),
            format!("clip_norm = {}", t.clip_norm),
            format!("cond_dropout = {}", t.cond_dropout),
            format!("batch = {}", t.batch),
            format!("steps = {}", t.steps),
            format!("warmup = {}", t.warmup),
            format!("checkpoint_every = {}", self.checkpoint_every),
            String::new(),
            "[sample]".into(),
            format!("schedule = \"{}\"", self.sample.schedule),
            format!("cfg = {}", self.sample.guidance),
            format!("temperature = {}", self.sample.temperature),
            format!("top_k = {}", self.sample.top_k),
            format!("class = {}", self.sample.class),
            format!("count = {}", self.sample.count),
            String::new(),
            "[dataset]".into(),
            format!("per_class = {}", self.dataset.per_class),
            format!("classes = {}", self.dataset.classes),
            format!("size = {}", self.dataset.size),
            String::new(),
            "[paths]".into(),
            format!("data = {:?}", self.paths.data.display().to_string()),
            format!("checkpoint = {:?}", self.paths.checkpoint.display().to_string()),
            format!("out = {:?}", self.paths.out.display().to_string()),
        ];
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn dotted_and_sectioned_keys() {
        let c = RunConfig::parse(
            "seed = 5 # trailing\nmodel.dim = 16\n[train]\nlr = 0.5\n[sample]\nschedule = \"dec:20,5\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.schedule().unwrap().counts, vec![20, 13, 5]);
        assert_eq!(c.train_config().seed, 5);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "model.colour = 3",
            "model.dim",
            "model.dim = \"many\"",
            "model.dim = -4",
            "sample.schedule = \"con:0,0\"",
            "sample.schedule = \"dec:5,20\"",
            "sample.schedule = \"con:3,4\"",
            "sample.schedule = \"explicit:1,2\"",
            "model.heads = 3",
            "tokenizer.patch = 3",
            "train.max_grad = 0",
            "sample.class = 2",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
