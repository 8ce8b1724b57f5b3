//! Command implementations behind the CLI. Every command is a pure function
//! of its `RunConfig` (plus files it reads), so repeated runs reproduce their
//! outputs byte for byte.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::budget::{
    attention_op_count, compute_budget, explicit_param_counts, implicit_param_counts,
    memory_estimate, optimize_schedule, AttentionMode, BudgetReport, LossProxyCurve,
    MemoryEstimate,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, LabeledImage};
use crate::equilibrium::{cosine_probe, ProbeSummary};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;
use crate::rng::{self, streams};
use crate::sampler::{self, EditSpec, GenerateOptions, Generation, GuidanceConfig};
use crate::schedule::{bench_schedules, make_schedule, IterSchedule};
use crate::tokenizer::{CodeBook, PatchCodec, Tokenizer};
use crate::trainer::{evaluate_loss, train_step, LossReport, TrainSample, TrainerState};

pub const CODEBOOK_FILE: &str = "codebook.viarcb";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub images: usize,
    pub class_means: Vec<f64>,
}

pub fn cmd_dataset(cfg: &RunConfig) -> Result<DatasetSummary> {
    let data = dataset::generate(&cfg.dataset_config())?;
    dataset::write_dir(&cfg.paths.data, &data)?;
    Ok(DatasetSummary {
        dir: cfg.paths.data.clone(),
        images: data.len(),
        class_means: dataset::class_means(&data, cfg.dataset.classes),
    })
}

/// Reads the dataset directory, generating it first if it has no labels.
pub fn load_or_create_dataset(cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    if !cfg.paths.data.join("labels.json").exists() {
        cmd_dataset(cfg)?;
    }
    let data = dataset::read_dir(&cfg.paths.data)?;
    if let Some(bad) = data.iter().find(|d| d.label >= cfg.dataset.classes) {
        return Err(Error::Data(format!(
            "label {} in {} exceeds dataset.classes",
            bad.label,
            cfg.paths.data.display()
        )));
    }
    Ok(data)
}

/// Tokenizer for the run: the stored code book if present, otherwise one
/// fitted to the training latents and written next to the data.
pub fn load_or_fit_tokenizer(cfg: &RunConfig, data: &[LabeledImage]) -> Result<Tokenizer> {
    let h = cfg.hierarchy()?;
    let path = cfg.paths.data.join(CODEBOOK_FILE);
    if path.exists() {
        let book = CodeBook::read_from(std::io::BufReader::new(File::open(&path)?))?;
        if book.vocab() != cfg.tokenizer.vocab || book.width() != cfg.tokenizer.width {
            return Err(Error::Config(format!(
                "{} holds {}×{} codes, config asks for {}×{}",
                path.display(),
                book.vocab(),
                book.width(),
                cfg.tokenizer.vocab,
                cfg.tokenizer.width
            )));
        }
        let channels = data.first().map_or(1, |d| d.image.channels());
        let codec = PatchCodec::dct(cfg.tokenizer.patch, channels, cfg.tokenizer.width)?;
        return Tokenizer::new(codec, book, h)?.round_to_f32();
    }
    let images: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
    let tok = dataset::fit_tokenizer(&images, &cfg.tokenizer, &h, cfg.seed)?;
    let mut w = BufWriter::new(File::create(&path)?);
    tok.book.write_to(&mut w)?;
    w.flush()?;
    Ok(tok)
}

pub fn tokenize_dataset(tok: &Tokenizer, data: &[LabeledImage]) -> Result<Vec<TrainSample>> {
    data.iter()
        .map(|d| {
            Ok(TrainSample {
                label: d.label,
                tokens: tok.tokenize(&d.image)?,
            })
        })
        .collect()
}

/// Fresh model and optimizer state for `cfg`.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, TrainerState)> {
    let mut r = rng::substream(cfg.seed, streams::INIT);
    let model = Model::new(cfg.model_shape()?, &cfg.init(), &mut r)?;
    let state = TrainerState::new(&model, cfg.seed);
    Ok((model, state))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Reports of the steps run by this invocation.
    pub reports: Vec<LossReport>,
}

fn periodic_path(cfg: &RunConfig, step: u64) -> PathBuf {
    cfg.paths.out.join(format!("ckpt_{step:06}.viarckpt"))
}

/// Trains up to `train.steps`, resuming from `paths.checkpoint` if `resume`
/// is set and the file exists. Metrics are appended one line per step.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainRun> {
    let data = load_or_create_dataset(cfg)?;
    fs::create_dir_all(&cfg.paths.out)?;
    let resumed = resume && cfg.paths.checkpoint.exists();
    let (tokenizer, mut model, mut state, start) = if resumed {
        let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
        if ck.model.shape != cfg.model_shape()? {
            return Err(Error::Config("checkpoint shape differs from the config".into()));
        }
        let state = ck
            .trainer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        (ck.tokenizer, ck.model, state, ck.step)
    } else {
        let tok = load_or_fit_tokenizer(cfg, &data)?;
        let (model, state) = init_model(cfg)?;
        (tok, model, state, 0)
    };
    let samples = tokenize_dataset(&tokenizer, &data)?;
    let tcfg = cfg.train_config();
    let metrics = cfg.paths.out.join(METRICS_FILE);
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resumed)
            .truncate(!resumed)
            .open(&metrics)?,
    );
    let mut reports = Vec::new();
    let snapshot = |model: &Model, state: &TrainerState, step: u64| Checkpoint {
        tokenizer: tokenizer.clone(),
        model: model.clone(),
        trainer: Some(state.clone()),
        step,
    };
    for step in start..tcfg.steps {
        let r = match train_step(&mut model, &tokenizer.book, &samples, &tcfg, &mut state) {
            Ok(r) => r,
            Err(e) => {
                if let Error::Training { report, .. } = &e {
                    serde_json::to_writer(&mut log, report)?;
                    log.write_all(b"\n")?;
                }
                log.flush()?;
                return Err(e);
            }
        };
        serde_json::to_writer(&mut log, &r)?;
        log.write_all(b"\n")?;
        reports.push(r);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < tcfg.steps {
            snapshot(&model, &state, done).save(&periodic_path(cfg, done))?;
        }
    }
    log.flush()?;
    let checkpoint = snapshot(&model, &state, start.max(tcfg.steps));
    if let Some(dir) = cfg.paths.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint.save(&cfg.paths.checkpoint)?;
    Ok(TrainRun {
        checkpoint,
        reports,
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
    if ck.model.shape.hierarchy.len() != cfg.model.resolutions.len() {
        return Err(Error::Spec(format!(
            "checkpoint has {} scales, config has {}",
            ck.model.shape.hierarchy.len(),
            cfg.model.resolutions.len()
        )));
    }
    Ok(ck)
}

fn schedule_for(cfg: &RunConfig, model: &Model) -> Result<IterSchedule> {
    make_schedule(&cfg.sample.schedule, model.shape.scales())
}

/// Guidance for the `i`-th output of a command.
fn guidance_for(cfg: &RunConfig, i: usize) -> GuidanceConfig {
    GuidanceConfig {
        seed: cfg.seed.wrapping_add(i as u64),
        ..cfg.guidance()
    }
}

fn write_outputs(dir: &Path, stem: &str, g: &Generation) -> Result<()> {
    fs::write(
        dir.join(format!("{stem}.tokens.json")),
        serde_json::to_vec(&g.tokens.to_json())?,
    )?;
    g.image.save(&dir.join(format!("{stem}.viarim")))?;
    fs::write(dir.join(format!("{stem}.pgm")), g.image.to_pgm())?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ExecutedRun {
    pub label: usize,
    /// Equilibrium steps per scale in the primary stream.
    pub steps: Vec<usize>,
    pub blocks: usize,
    pub blocks_all_streams: usize,
}

impl From<&Generation> for ExecutedRun {
    fn from(g: &Generation) -> Self {
        Self {
            label: g.label,
            steps: g.steps.clone(),
            blocks: g.total_blocks(),
            blocks_all_streams: g.blocks_all_streams,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleReport {
    pub schedule: IterSchedule,
    pub budget: BudgetReport,
    pub runs: Vec<ExecutedRun>,
}

fn sample_report(model: &Model, schedule: IterSchedule, gens: &[Generation]) -> SampleReport {
    let budget = compute_budget(&schedule, model.shape.depth)
        .with_hierarchy(&model.shape.hierarchy)
        .with_memory(memory_estimate(model.param_counts().total(), 4));
    SampleReport {
        schedule,
        budget,
        runs: gens.iter().map(ExecutedRun::from).collect(),
    }
}

/// Draws `sample.count` images of `sample.class` into `paths.out`.
pub fn cmd_sample(cfg: &RunConfig) -> Result<(Vec<Generation>, SampleReport)> {
    let ck = load_checkpoint(cfg)?;
    let schedule = schedule_for(cfg, &ck.model)?;
    fs::create_dir_all(&cfg.paths.out)?;
    let mut gens = Vec::with_capacity(cfg.sample.count);
    for i in 0..cfg.sample.count {
        let g = sampler::generate(
            &ck.model,
            &ck.tokenizer,
            cfg.sample.class,
            &schedule,
            &guidance_for(cfg, i),
            &GenerateOptions::default(),
        )?;
        write_outputs(&cfg.paths.out, &format!("sample_{i:03}"), &g)?;
        gens.push(g);
    }
    let report = sample_report(&ck.model, schedule, &gens);
    fs::write(cfg.paths.out.join("budget.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok((gens, report))
}

/// Edit region in unit-square coordinates: `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditBox {
    pub y: (f64, f64),
    pub x: (f64, f64),
}

impl Default for EditBox {
    fn default() -> Self {
        Self {
            y: (0.25, 0.75),
            x: (0.25, 0.75),
        }
    }
}

impl std::str::FromStr for EditBox {
    type Err = Error;

    /// `y0,y1,x0,x1`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad box `{s}`"))))
            .collect::<Result<_>>()?;
        match v.as_slice() {
            &[y0, y1, x0, x1] if y0 <= y1 && x0 <= x1 => Ok(Self {
                y: (y0, y1),
                x: (x0, x1),
            }),
            _ => Err(Error::Config(format!("box `{s}` must be y0,y1,x0,x1 with y0≤y1, x0≤x1"))),
        }
    }
}

/// Regenerates the box of a reference image as class `sample.class`.
///
/// Without `reference`, the first dataset image of another class is used.
pub fn cmd_inpaint(
    cfg: &RunConfig,
    reference: Option<&Path>,
    region: EditBox,
) -> Result<(Generation, SampleReport)> {
    let ck = load_checkpoint(cfg)?;
    let schedule = schedule_for(cfg, &ck.model)?;
    let (image, ref_label) = match reference {
        Some(p) => (Image::load(p)?, cfg.sample.class),
        None => {
            let data = load_or_create_dataset(cfg)?;
            let d = data
                .iter()
                .find(|d| d.label != cfg.sample.class)
                .or(data.first())
                .ok_or_else(|| Error::Data("empty dataset".into()))?;
            (d.image.clone(), d.label)
        }
    };
    let tokens = ck.tokenizer.tokenize(&image)?;
    let edit = EditSpec::boxed(
        tokens.clone(),
        ck.model.shape.hierarchy.resolutions(),
        region.y,
        region.x,
        Some(cfg.sample.class),
    );
    let g = sampler::inpaint(&ck.model, &ck.tokenizer, ref_label, &edit, &schedule, &guidance_for(cfg, 0))?;
    fs::create_dir_all(&cfg.paths.out)?;
    write_outputs(&cfg.paths.out, "reference", &Generation {
        image: ck.tokenizer.decode(&tokens)?,
        tokens,
        ..g.clone()
    })?;
    write_outputs(&cfg.paths.out, "inpaint", &g)?;
    let report = sample_report(&ck.model, schedule, std::slice::from_ref(&g));
    fs::write(cfg.paths.out.join("budget.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok((g, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleProbe {
    pub scale: usize,
    pub resolution: usize,
    pub summary: ProbeSummary,
}

/// Generates one image with probing on, writing `trace_scale{k}.jsonl` per
/// scale and `probe_summary.json`.
pub fn cmd_probe(cfg: &RunConfig) -> Result<(Generation, Vec<ScaleProbe>)> {
    let ck = load_checkpoint(cfg)?;
    let schedule = schedule_for(cfg, &ck.model)?;
    let opts = GenerateOptions {
        probe: true,
        ..GenerateOptions::default()
    };
    let g = sampler::generate(&ck.model, &ck.tokenizer, cfg.sample.class, &schedule, &guidance_for(cfg, 0), &opts)?;
    fs::create_dir_all(&cfg.paths.out)?;
    let mut summaries = Vec::with_capacity(g.traces.len());
    for (k, trace) in g.traces.iter().enumerate() {
        let mut w = BufWriter::new(File::create(cfg.paths.out.join(format!("trace_scale{k}.jsonl")))?);
        trace.write_jsonl(k, &mut w)?;
        w.flush()?;
        summaries.push(ScaleProbe {
            scale: k,
            resolution: ck.model.shape.hierarchy.side(k),
            summary: cosine_probe(trace)?,
        });
    }
    fs::write(
        cfg.paths.out.join("probe_summary.json"),
        serde_json::to_vec_pretty(&summaries)?,
    )?;
    Ok((g, summaries))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub name: String,
    pub counts: Vec<usize>,
    pub budget: BudgetReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchitectureRow {
    pub name: String,
    /// Middle-section blocks; 0 stands for the implicit layer.
    pub middle_blocks: usize,
    pub middle_params: usize,
    pub total_params: usize,
    pub memory: MemoryEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub scales: usize,
    pub explicit_depth: usize,
    pub schedules: Vec<ScheduleRow>,
    pub raster_attention_ops: u128,
    pub next_scale_attention_ops: u128,
    pub architectures: Vec<ArchitectureRow>,
    /// Schedule chosen from a measured loss proxy at the budget of the
    /// first schedule, when a checkpoint is available.
    pub optimized: Option<ScheduleRow>,
}

pub const EMULATION_DEPTHS: [usize; 5] = [1, 5, 10, 15, 20];

/// Budget, attention and memory tables for the configured shape.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let shape = cfg.model_shape()?;
    let h = &shape.hierarchy;
    let p = shape.depth;
    let schedules = bench_schedules()
        .into_iter()
        .map(|spec| {
            let s = make_schedule(&spec, h.len())?;
            Ok(ScheduleRow {
                name: spec.to_string(),
                counts: s.counts.clone(),
                budget: compute_budget(&s, p).with_hierarchy(h),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let imp = implicit_param_counts(&shape);
    let mut architectures = vec![ArchitectureRow {
        name: "implicit".into(),
        middle_blocks: 0,
        middle_params: imp.implicit_block + imp.fusion,
        total_params: imp.total(),
        memory: memory_estimate(imp.total(), 4),
    }];
    for d in EMULATION_DEPTHS {
        let e = explicit_param_counts(&shape, d);
        architectures.push(ArchitectureRow {
            name: format!("explicit-{d}"),
            middle_blocks: d,
            middle_params: e.implicit_block,
            total_params: e.total(),
            memory: memory_estimate(e.total(), 4),
        });
    }
    let optimized = if cfg.paths.checkpoint.exists() {
        Some(optimized_row(cfg, &schedules[0])?)
    } else {
        None
    };
    let report = BenchReport {
        scales: h.len(),
        explicit_depth: p,
        schedules,
        raster_attention_ops: attention_op_count(h, AttentionMode::Raster),
        next_scale_attention_ops: attention_op_count(h, AttentionMode::NextScale),
        architectures,
        optimized,
    };
    fs::create_dir_all(&cfg.paths.out)?;
    fs::write(cfg.paths.out.join("bench.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(cfg.paths.out.join("bench.txt"), bench_table(&report))?;
    Ok(report)
}

pub const PROXY_COUNTS: [usize; 4] = [1, 2, 5, 10];

/// Per-scale teacher-forced loss of a held-out batch at each count of
/// `PROXY_COUNTS`.
pub fn measure_proxy(ck: &Checkpoint, held_out: &[TrainSample]) -> Result<LossProxyCurve> {
    let scales = ck.model.shape.scales();
    let mut points = vec![Vec::new(); scales];
    for c in PROXY_COUNTS {
        let (_, per) = evaluate_loss(&ck.model, &ck.tokenizer.book, held_out, c)?;
        for (k, l) in per.into_iter().enumerate() {
            points[k].push((c, l));
        }
    }
    LossProxyCurve::new(points)
}

fn optimized_row(cfg: &RunConfig, reference: &ScheduleRow) -> Result<ScheduleRow> {
    let ck = load_checkpoint(cfg)?;
    let held_out: Vec<LabeledImage> = dataset::generate(&crate::dataset::DatasetConfig {
        per_class: 8,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.dataset_config()
    })?;
    let samples = tokenize_dataset(&ck.tokenizer, &held_out)?;
    let proxy = measure_proxy(&ck, &samples)?;
    let c_max = *PROXY_COUNTS.last().expect("non-empty") * 2;
    let s = optimize_schedule(&proxy, reference.budget.total, ck.model.shape.depth, c_max)?;
    Ok(ScheduleRow {
        name: "optimized".into(),
        counts: s.counts.clone(),
        budget: compute_budget(&s, ck.model.shape.depth).with_hierarchy(&ck.model.shape.hierarchy),
    })
}

fn fmt_bytes(b: u64) -> String {
    if b >= 1 << 20 {
        format!("{:.2} MiB", b as f64 / (1u64 << 20) as f64)
    } else {
        format!("{:.1} KiB", b as f64 / 1024.0)
    }
}

/// Aligned plain-text rendering of a bench report.
pub fn bench_table(r: &BenchReport) -> String {
    let mut s = format!("schedules (K = {}, p = {})\n", r.scales, r.explicit_depth);
    s += &format!("{:<12} {:<24} {:>8} {:>8}\n", "schedule", "c_k", "steps", "blocks");
    let rows = r.schedules.iter().chain(r.optimized.iter());
    for row in rows {
        s += &format!(
            "{:<12} {:<24} {:>8} {:>8}\n",
            row.name,
            format!("{:?}", row.counts),
            row.budget.implicit_steps,
            row.budget.total
        );
    }
    s += &format!(
        "\nattention ops: raster {}  next-scale {}  ratio {:.4}\n\n",
        r.raster_attention_ops,
        r.next_scale_attention_ops,
        r.next_scale_attention_ops as f64 / r.raster_attention_ops as f64
    );
    s += &format!(
        "{:<12} {:>10} {:>10} {:>12} {:>12} {:>12}\n",
        "model", "middle", "total", "params", "grads", "optimizer"
    );
    for a in &r.architectures {
        s += &format!(
            "{:<12} {:>10} {:>10} {:>12} {:>12} {:>12}\n",
            a.name,
            a.middle_params,
            a.total_params,
            fmt_bytes(a.memory.params_bytes),
            fmt_bytes(a.memory.grads_bytes),
            fmt_bytes(a.memory.optimizer_bytes)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_box_parsing() {
        let b: EditBox = "0,0.5,0.25,1".parse().unwrap();
        assert_eq!(b.y, (0.0, 0.5));
        assert_eq!(b.x, (0.25, 1.0));
        assert!("0.5,0.1,0,1".parse::<EditBox>().is_err());
        assert!("1,2,3".parse::<EditBox>().is_err());
    }

    #[test]
    fn bench_lists_every_schedule_and_constant_implicit_memory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out = dir.path().into();
        cfg.paths.checkpoint = dir.path().join("none.ckpt");
        let r = cmd_bench(&cfg).unwrap();
        let names: Vec<&str> = r.schedules.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["con:10,10", "dec:20,5", "dec:20,10", "dec:10,5", "con:20,20", "con:5,5"]
        );
        // Memory slope across emulation depths is one block's bytes.
        let a = &r.architectures;
        for w in a[1..].windows(2) {
            let dd = (w[1].middle_blocks - w[0].middle_blocks) as u64;
            let per_block = 4 * crate::backbone::BlockParams::count(cfg.model.dim) as u64;
            assert_eq!(w[1].memory.params_bytes - w[0].memory.params_bytes, dd * per_block);
        }
        assert!(bench_table(&r).contains("dec:20,5"));
        assert!(dir.path().join("bench.json").exists());
    }
}
