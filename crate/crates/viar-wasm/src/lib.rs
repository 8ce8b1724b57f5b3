//! Browser bindings: a budget table, a small model trained in the page, and
//! traced sampling from it.
//!
//! The `demo` functions are plain Rust returning JSON strings; the exported
//! wrappers only translate errors for JavaScript.

use wasm_bindgen::prelude::*;

pub mod demo {
    use serde::Serialize;
    use viar_core::budget::{attention_op_count, compute_budget, AttentionMode, BudgetReport};
    use viar_core::config::RunConfig;
    use viar_core::dataset;
    use viar_core::equilibrium::cosine_probe;
    use viar_core::harness;
    use viar_core::image::Image;
    use viar_core::model::Model;
    use viar_core::sampler::{generate, GenerateOptions, GuidanceConfig};
    use viar_core::schedule::make_schedule;
    use viar_core::tokenizer::{ScaleHierarchy, Tokenizer};
    use viar_core::trainer::{train_step, TrainConfig, TrainSample, TrainerState};
    use viar_core::{Error, Result};

    #[derive(Serialize)]
    struct BudgetRow {
        schedule: String,
        budget: BudgetReport,
        raster_attention_ops: u128,
        next_scale_attention_ops: u128,
    }

    /// Budget of `schedule` over a geometric hierarchy `1, 2, 4, …` of
    /// `scales` levels with `p` explicit blocks per side.
    pub fn budget_json(schedule: &str, scales: usize, p: usize) -> Result<String> {
        let h = ScaleHierarchy::geometric(2, scales)?;
        let s = make_schedule(&schedule.parse()?, scales)?;
        let row = BudgetRow {
            schedule: schedule.to_string(),
            budget: compute_budget(&s, p).with_hierarchy(&h),
            raster_attention_ops: attention_op_count(&h, AttentionMode::Raster),
            next_scale_attention_ops: attention_op_count(&h, AttentionMode::NextScale),
        };
        Ok(serde_json::to_string(&row)?)
    }

    /// Small configuration sized for in-page training.
    pub fn demo_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.dim = 16;
        cfg.tokenizer.vocab = 16;
        cfg.dataset.per_class = 48;
        cfg.train.batch = 8;
        cfg.train.max_free = 4;
        cfg.train.max_grad = 4;
        cfg.train.warmup = 10;
        cfg
    }

    pub struct Demo {
        cfg: TrainConfig,
        tokenizer: Tokenizer,
        model: Model,
        state: TrainerState,
        samples: Vec<TrainSample>,
        pub losses: Vec<f64>,
    }

    #[derive(Serialize)]
    pub struct SampleView {
        pub width: usize,
        pub height: usize,
        /// Row-major grayscale in `[0, 1]`.
        pub pixels: Vec<f32>,
        pub tokens: serde_json::Value,
        pub steps: Vec<usize>,
        /// Consecutive-iterate cosine per scale.
        pub cosines: Vec<Vec<f64>>,
        pub crossings: Vec<Vec<(f64, Option<usize>)>>,
        pub blocks: usize,
    }

    impl Demo {
        pub fn new(seed: u64) -> Result<Self> {
            let cfg = demo_config(seed);
            cfg.validate()?;
            let data = dataset::generate(&cfg.dataset_config())?;
            let images: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
            let tokenizer = dataset::fit_tokenizer(&images, &cfg.tokenizer, &cfg.hierarchy()?, seed)?;
            let samples = harness::tokenize_dataset(&tokenizer, &data)?;
            let (model, state) = harness::init_model(&cfg)?;
            Ok(Self {
                cfg: cfg.train_config(),
                tokenizer,
                model,
                state,
                samples,
                losses: Vec::new(),
            })
        }

        /// Runs `steps` optimizer steps and returns the last loss.
        pub fn train(&mut self, steps: usize) -> Result<f64> {
            for _ in 0..steps {
                let r = train_step(&mut self.model, &self.tokenizer.book, &self.samples, &self.cfg, &mut self.state)?;
                self.losses.push(r.loss);
            }
            self.losses
                .last()
                .copied()
                .ok_or_else(|| Error::Contract("no steps run".into()))
        }

        pub fn sample(&self, class: usize, schedule: &str, guidance: f64, seed: u64) -> Result<SampleView> {
            let sched = make_schedule(&schedule.parse()?, self.model.shape.scales())?;
            let g = generate(
                &self.model,
                &self.tokenizer,
                class,
                &sched,
                &GuidanceConfig {
                    scale: guidance,
                    seed,
                    ..GuidanceConfig::default()
                },
                &GenerateOptions::default(),
            )?;
            Ok(SampleView {
                width: g.image.width(),
                height: g.image.height(),
                pixels: g.image.pixels().iter().map(|&p| p.clamp(0.0, 1.0) as f32).collect(),
                tokens: g.tokens.to_json(),
                steps: g.steps.clone(),
                cosines: g.traces.iter().map(|t| t.cosines.clone()).collect(),
                crossings: g
                    .traces
                    .iter()
                    .map(|t| cosine_probe(t).map(|s| s.crossings))
                    .collect::<Result<_>>()?,
                blocks: g.total_blocks(),
            })
        }
    }
}

fn js(e: viar_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// JSON budget report for one schedule string.
#[wasm_bindgen(js_name = budgetTable)]
pub fn budget_table(schedule: &str, scales: usize, p: usize) -> Result<String, JsError> {
    demo::budget_json(schedule, scales, p).map_err(js)
}

#[wasm_bindgen]
pub struct Demo(demo::Demo);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        demo::Demo::new(u64::from(seed)).map(Demo).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.0.train(steps).map_err(js)
    }

    #[wasm_bindgen(js_name = lossHistory)]
    pub fn loss_history(&self) -> Vec<f64> {
        self.0.losses.clone()
    }

    /// JSON with pixels, tokens, executed steps and cosine traces.
    pub fn sample(&self, class: usize, schedule: &str, guidance: f64, seed: u32) -> Result<String, JsError> {
        let view = self.0.sample(class, schedule, guidance, u64::from(seed)).map_err(js)?;
        serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
    }
}
