//! End-to-end acceptance run: fourteen criteria, one PASS/FAIL line each.
//!
//! The toy model is trained once on a background thread while the
//! model-independent criteria run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viar_core::backbone::{build_mask, run_stack, AttnContext, BlockParams, EmbedSample};
use viar_core::budget::{
    attention_op_count, compute_budget, explicit_param_counts, implicit_param_counts,
    memory_estimate, optimize_schedule, AttentionMode, LossProxyCurve,
};
use viar_core::config::RunConfig;
use viar_core::dataset::{self, LabeledImage};
use viar_core::equilibrium::{cosine_probe, solve_fixed_point, EquilibriumConfig, EquilibriumState};
use viar_core::harness;
use viar_core::model::{InitConfig, Model, ModelShape};
use viar_core::rng::{self, streams};
use viar_core::sampler::{
    apply_guidance, generate, infer_scale, sample_tokens, CacheMode, EditSpec, GenerateOptions,
    Generation, GuidanceConfig, KvCacheStore,
};
use viar_core::schedule::{make_schedule, ScheduleSpec};
use viar_core::tensor::{Eager, Graph, ParamStore, Tape, Tensor};
use viar_core::tokenizer::{CodeBook, ScaleHierarchy, TokenGrid, TokenHierarchy, Tokenizer};
use viar_core::trainer::{
    forward_teacher_forced, sjfb_backward, train_step, LossReport, TrainConfig, TrainSample,
    TrainerState,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Toy fixtures.

fn toy_model(seed: u64) -> (Model, CodeBook, Vec<TrainSample>) {
    let shape = ModelShape {
        dim: 16,
        heads: 2,
        vocab: 16,
        code_width: 4,
        depth: 1,
        classes: 2,
        hierarchy: ScaleHierarchy::new(vec![1, 2]).unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = InitConfig {
        std: 0.2,
        fusion_std: 0.2,
    };
    let model = Model::new(shape, &init, &mut rng).unwrap();
    let entries = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let book = CodeBook::new(Tensor::matrix(16, 4, entries).unwrap()).unwrap();
    let null = model.embed.cond.null();
    let batch = [0, 1, null]
        .into_iter()
        .map(|label| TrainSample {
            label,
            tokens: TokenHierarchy::new(vec![
                TokenGrid::new(1, vec![rng.gen_range(0..16)]).unwrap(),
                TokenGrid::new(2, (0..4).map(|_| rng.gen_range(0..16)).collect()).unwrap(),
            ]),
        })
        .collect();
    (model, book, batch)
}

fn tape_grads(model: &Model, book: &CodeBook, batch: &[TrainSample], n: usize, m: usize) -> (Vec<Option<Tensor>>, Tensor, usize) {
    let mut tape = Tape::new(&model.params);
    let out = forward_teacher_forced(&mut tape, model, book, batch, n, m, None).unwrap();
    sjfb_backward(&mut tape, out.loss).unwrap();
    (tape.param_grads(), out.z_start, tape.len())
}

fn eager_loss(model: &Model, book: &CodeBook, batch: &[TrainSample], n: usize, m: usize, frozen: Option<&Tensor>) -> f64 {
    let mut g = Eager::new(&model.params);
    forward_teacher_forced(&mut g, model, book, batch, n, m, frozen)
        .unwrap()
        .loss
        .item()
        .unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity.

fn gradient_fidelity() -> Outcome {
    let (model, book, batch) = toy_model(7);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (n, m) in [(0, 1), (2, 3), (0, 4)] {
        let (grads, z_start, _) = tape_grads(&model, &book, &batch, n, m);
        let frozen = (n > 0).then_some(&z_start);
        let mut probe = model.clone();
        for (i, id) in model.params.ids().enumerate() {
            let base = model.params.get(id).clone();
            let mut fd = vec![0.0; base.numel()];
            for (j, slot) in fd.iter_mut().enumerate() {
                let mut plus = base.to_vec();
                plus[j] += eps;
                probe.params.set(id, Tensor::new(base.shape().to_vec(), plus).unwrap());
                let lp = eager_loss(&probe, &book, &batch, n, m, frozen);
                let mut minus = base.to_vec();
                minus[j] -= eps;
                probe.params.set(id, Tensor::new(base.shape().to_vec(), minus).unwrap());
                let lm = eager_loss(&probe, &book, &batch, n, m, frozen);
                *slot = (lp - lm) / (2.0 * eps);
            }
            probe.params.set(id, base.clone());
            let g = grads[i].as_ref().map_or_else(|| vec![0.0; fd.len()], |t| t.to_vec());
            let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = if scale < 1e-12 { diff } else { diff / scale };
            ensure!(
                rel < 1e-4,
                "(n={n}, m={m}) `{}`: relative error {rel:.3e}",
                model.params.name(id)
            );
            worst = worst.max(rel);
        }
    }
    Ok(format!(
        "{} tensors × 3 windows, max relative error {worst:.2e}",
        model.params.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. Truncation consistency against a plain unrolled forward.

fn unrolled_grads(model: &Model, book: &CodeBook, batch: &[TrainSample], iters: usize) -> Vec<Option<Tensor>> {
    let mut g = Tape::new(&model.params);
    let h = &model.shape.hierarchy;
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
    let e = model.embed.embed(&mut g, book, h, &samples, 0..h.len()).unwrap();
    let cond = model.embed.cond.rows(&mut g, &labels, h.total_tokens()).unwrap();
    let x = run_stack(&mut g, &model.pre, &e, &cond, &ctx, None, None).unwrap();
    let x_inj = g.identity(&x);
    let mut z = g.identity(&x);
    for _ in 0..iters {
        let fused = model.implicit.fusion.fuse(&mut g, &z, &x_inj).unwrap();
        z = viar_core::backbone::transformer_block(&mut g, &model.implicit.block, &fused, &cond, &ctx)
            .unwrap()
            .out;
    }
    let hidden = run_stack(&mut g, &model.post, &z, &cond, &ctx, None, None).unwrap();
    let w = g.param(model.head.weight);
    let b = g.param(model.head.bias);
    let logits = g.matmul(&hidden, &w).unwrap();
    let logits = g.add_bias(&logits, &b).unwrap();
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.tokens.flatten()).collect();
    let loss = g.cross_entropy(&logits, &targets).unwrap();
    g.backward(loss).unwrap();
    g.param_grads()
}

fn truncation_consistency() -> Outcome {
    let (model, book, batch) = toy_model(11);
    let mut checked = 0;
    for t in [1, 3, 6] {
        let (sjfb, _, _) = tape_grads(&model, &book, &batch, 0, t);
        let full = unrolled_grads(&model, &book, &batch, t);
        for (i, (a, b)) in sjfb.iter().zip(&full).enumerate() {
            let same = match (a, b) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            };
            ensure!(same, "T={t}: gradient of `{}` differs", model.params.name(model.params.ids().nth(i).unwrap()));
            checked += 1;
        }
    }
    Ok(format!("{checked} gradient tensors bitwise equal for T ∈ {{1,3,6}}"))
}

// ---------------------------------------------------------------------------
// 3. Constant training memory.

fn constant_memory() -> Outcome {
    let (model, book, batch) = toy_model(5);
    for m in [1, 3] {
        let (_, _, a) = tape_grads(&model, &book, &batch, 0, m);
        let (_, _, b) = tape_grads(&model, &book, &batch, 10, m);
        ensure!(a == b, "m={m}: {a} nodes at n=0, {b} at n=10");
    }
    // The same through real optimizer steps with n drawn from 0..=10.
    let mut model = model;
    let cfg = TrainConfig {
        max_free: 10,
        max_grad: 1,
        batch: 3,
        steps: 30,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(&model, 2);
    let reports: Vec<LossReport> = (0..30)
        .map(|_| train_step(&mut model, &book, &batch, &cfg, &mut state).unwrap())
        .collect();
    let nodes = reports[0].tape_nodes;
    ensure!(reports.iter().all(|r| r.tape_nodes == nodes), "tape size varied across steps");
    let ns: std::collections::BTreeSet<usize> = reports.iter().map(|r| r.n).collect();
    ensure!(ns.contains(&0) && ns.len() > 3, "too few distinct n values: {ns:?}");
    Ok(format!("{nodes} tape nodes for every n in {ns:?} (m = 1)"))
}

// ---------------------------------------------------------------------------
// 4. Fixed-point solver on G(z) = 0.5 z + b.

fn affine_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Random data for the fixed-point distance, dyadic data for exact ratios.
    let random: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let dyadic = vec![0.25, -0.75, 1.0, 0.5, -1.5, 0.125, 2.0, -0.25];
    let mut worst_ratio = 0.0f64;
    let mut worst_dist = 0.0f64;
    for (b, exact) in [(random, false), (dyadic, true)] {
        let b = Tensor::vector(b);
        let start = Tensor::vector(vec![1.0, -1.0, 0.5, 0.0, 1.0, 1.0, -1.0, 0.0]);
        let out = ok(solve_fixed_point(
            EquilibriumState::warm_start(start),
            &EquilibriumConfig::fixed(30),
            |z, _| z.zip_map(&b, |zv, bv| 0.5 * zv + bv),
        ))?;
        let star = b.map(|v| 2.0 * v);
        let dist = ok(out.z.zip_map(&star, |a, b| a - b))?.norm();
        ensure!(dist <= 1e-8, "‖z − 2b‖ = {dist:e}");
        ensure!(out.trace.steps() <= 30, "{} steps", out.trace.steps());
        worst_dist = worst_dist.max(dist);
        let r = &out.trace.residuals;
        for w in r.windows(2) {
            if !exact && w[1] < 1e-6 {
                break;
            }
            let ratio = w[1] / w[0];
            ensure!((ratio - 0.5).abs() <= 1e-9, "residual ratio {ratio}");
            worst_ratio = worst_ratio.max((ratio - 0.5).abs());
        }
    }
    Ok(format!("max ‖z−2b‖ {worst_dist:.1e}, max |ratio−0.5| {worst_ratio:.1e} in 30 steps"))
}

// ---------------------------------------------------------------------------
// 6. Causality.

fn causality(model: &Model, tok: &Tokenizer, data: &[TrainSample]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = &model.shape.hierarchy;
    let v = model.shape.vocab;
    for trial in 0..10 {
        let base = data[rng.gen_range(0..data.len())].clone();
        let split = rng.gen_range(0..h.len() - 1);
        let mut changed = base.clone();
        for k in split + 1..h.len() {
            let grid = changed.tokens.grid_mut(k);
            grid.indices_mut().shuffle(&mut rng);
            let first = rng.gen_range(0..v);
            grid.indices_mut()[0] = first;
        }
        let logits = |s: &TrainSample| {
            let mut g = Eager::new(&model.params);
            forward_teacher_forced(&mut g, model, &tok.book, std::slice::from_ref(s), 0, 10, None)
                .unwrap()
                .logits
        };
        let (a, b) = (logits(&base), logits(&changed));
        let keep = h.offset(split) + h.tokens_at(split);
        ensure!(
            a.data()[..keep * v].iter().zip(&b.data()[..keep * v]).all(|(x, y)| x.to_bits() == y.to_bits()),
            "trial {trial}: logits of scales ≤ {split} changed"
        );
    }
    Ok("10 trials: earlier-scale logits bitwise unchanged".into())
}

// ---------------------------------------------------------------------------
// 7. Budget arithmetic.

fn budget_arithmetic(model: &Model, tok: &Tokenizer) -> Outcome {
    let s = ok(make_schedule(&ScheduleSpec::Constant(10), 10))?;
    let c = compute_budget(&s, 5).total;
    ensure!(c == 200, "C = {c}");
    let k = model.shape.scales();
    let mut seen = Vec::new();
    for spec in ["con:10,10", "dec:20,5", "con:5,5"] {
        let sched = ok(make_schedule(&ok(spec.parse())?, k))?;
        let report = compute_budget(&sched, model.shape.depth);
        let g = ok(generate(model, tok, 0, &sched, &GuidanceConfig::default(), &GenerateOptions::default()))?;
        ensure!(
            g.total_blocks() == report.total,
            "{spec}: executed {} blocks, report {}",
            g.total_blocks(),
            report.total
        );
        seen.push(format!("{spec}→{}", report.total));
    }
    Ok(format!("C(con:10,10; p=5, K=10) = 200; executed = reported for {}", seen.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. Complexity accounting.

fn complexity() -> Outcome {
    let h = ok(ScaleHierarchy::geometric(2, 4))?;
    let ns = attention_op_count(&h, AttentionMode::NextScale);
    let r = attention_op_count(&h, AttentionMode::Raster);
    ensure!(ns == 4369 && r == 89_440, "got {ns} and {r}");
    let m: u128 = 64;
    ensure!(r == m * (m + 1) * (2 * m + 1) / 6, "raster closed form");
    let mut prev = f64::INFINITY;
    let mut ratios = Vec::new();
    for k in 2..=6 {
        let h = ok(ScaleHierarchy::geometric(2, k))?;
        let ratio = attention_op_count(&h, AttentionMode::NextScale) as f64
            / attention_op_count(&h, AttentionMode::Raster) as f64;
        ensure!(ratio < prev, "ratio not decreasing at K={k}");
        prev = ratio;
        ratios.push(format!("{ratio:.2e}"));
    }
    Ok(format!("4369 / 89,440; ratio K=2..6: {}", ratios.join(" > ")))
}

// ---------------------------------------------------------------------------
// 9. Parameter-ratio structure.

fn parameter_ratio(model: &Model) -> Outcome {
    let shape = &model.shape;
    let imp = implicit_param_counts(shape);
    let counted = model.param_counts();
    ensure!(imp == counted, "analytic {imp:?} vs enumerated {counted:?}");
    // Build an explicit middle of 20 blocks and count its tensors directly.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..20 {
        ok(BlockParams::init(&mut store, &format!("mid.{i}"), shape.dim, shape.heads, 0.02, &mut rng))?;
    }
    let explicit_middle = store.count();
    let exp = explicit_param_counts(shape, 20);
    ensure!(exp.implicit_block == explicit_middle, "explicit middle {} vs {}", exp.implicit_block, explicit_middle);
    ensure!(
        explicit_middle == 20 * counted.implicit_block,
        "ratio {}:{}",
        counted.implicit_block,
        explicit_middle
    );
    let mem = memory_estimate(counted.total(), 4);
    ensure!(mem.optimizer_bytes == 2 * mem.params_bytes, "optimizer bytes");
    ensure!(mem.grads_bytes == mem.params_bytes, "grad bytes");
    let with_fusion = (counted.implicit_block + counted.fusion) as f64 / explicit_middle as f64;
    Ok(format!(
        "middle {}:{} = 1:20 (reduction {:.1}%; {:.1}% counting the fusion projection); optimizer = 2 × {} B",
        counted.implicit_block,
        explicit_middle,
        100.0 * (1.0 - 1.0 / 20.0),
        100.0 * (1.0 - with_fusion),
        mem.params_bytes
    ))
}

// ---------------------------------------------------------------------------
// 13. Schedule search against exhaustive enumeration.

fn schedule_search() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c_max = 8;
    for inst in 0..25 {
        let p = rng.gen_range(0..3);
        let curves: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut v: Vec<f64> = (0..c_max).map(|_| rng.gen_range(0.0..5.0)).collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                v
            })
            .collect();
        let budget = rng.gen_range(3 * (2 * p + 1)..=3 * (2 * p + c_max));
        let proxy = ok(LossProxyCurve::new(
            curves.iter().map(|c| c.iter().enumerate().map(|(i, &l)| (i + 1, l)).collect()).collect(),
        ))?;
        let got = ok(optimize_schedule(&proxy, budget, p, c_max))?.counts;
        let mut best: Option<(f64, [usize; 3])> = None;
        for a in 1..=c_max {
            for b in 1..=c_max {
                for c in 1..=c_max {
                    if 3 * 2 * p + a + b + c > budget {
                        continue;
                    }
                    let cost = curves[0][a - 1] + curves[1][b - 1] + curves[2][c - 1];
                    if best.map_or(true, |(bc, _)| cost < bc) {
                        best = Some((cost, [a, b, c]));
                    }
                }
            }
        }
        let (best_cost, _) = best.expect("feasible");
        let got_cost: f64 = (0..3).map(|k| curves[k][got[k] - 1]).sum();
        let used: usize = got.iter().map(|c| 2 * p + c).sum();
        ensure!(used <= budget, "instance {inst}: budget {budget} exceeded by {got:?}");
        ensure!(
            (got_cost - best_cost).abs() <= 1e-12,
            "instance {inst}: DP {got:?} cost {got_cost} vs exhaustive {best_cost}"
        );
    }
    Ok("25 random instances: DP optimum equals exhaustive optimum".into())
}

// ---------------------------------------------------------------------------
// Trained toy checkpoint.

struct Trained {
    tokenizer: Tokenizer,
    model: Model,
    data: Vec<LabeledImage>,
    samples: Vec<TrainSample>,
    reports: Vec<LossReport>,
    seconds: f64,
}

fn train_toy() -> Trained {
    let cfg = RunConfig::default();
    let started = Instant::now();
    let data = dataset::generate(&cfg.dataset_config()).unwrap();
    let images: Vec<_> = data.iter().map(|d| d.image.clone()).collect();
    let tokenizer = dataset::fit_tokenizer(&images, &cfg.tokenizer, &cfg.hierarchy().unwrap(), cfg.seed).unwrap();
    let samples = harness::tokenize_dataset(&tokenizer, &data).unwrap();
    let (mut model, mut state) = harness::init_model(&cfg).unwrap();
    let tcfg = cfg.train_config();
    let reports = (0..tcfg.steps)
        .map(|_| train_step(&mut model, &tokenizer.book, &samples, &tcfg, &mut state).unwrap())
        .collect();
    Trained {
        tokenizer,
        model,
        data,
        samples,
        reports,
        seconds: started.elapsed().as_secs_f64(),
    }
}

// 5. Cache equivalence.
fn cache_equivalence(t: &Trained) -> Outcome {
    let sched = ok(make_schedule(&ScheduleSpec::Constant(10), t.model.shape.scales()))?;
    let mut worst = 0.0f64;
    let mut runs = 0;
    for label in 0..2 {
        for seed in 0..3 {
            let guidance = GuidanceConfig {
                scale: 1.5,
                seed,
                ..GuidanceConfig::default()
            };
            let run = |mode| {
                generate(&t.model, &t.tokenizer, label, &sched, &guidance, &GenerateOptions {
                    mode,
                    ..GenerateOptions::default()
                })
            };
            let a = ok(run(CacheMode::Cached))?;
            let b = ok(run(CacheMode::Recompute))?;
            ensure!(a.tokens == b.tokens, "label {label} seed {seed}: token hierarchies differ");
            for (x, y) in a.logits.iter().zip(&b.logits) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    worst = worst.max((p - q).abs());
                }
            }
            runs += 1;
        }
    }
    ensure!(worst < 1e-5, "max logit difference {worst:e}");
    Ok(format!("{runs} generations: identical tokens, max |Δlogit| {worst:.1e}"))
}

// 10. Training smoke.
fn training_smoke(t: &Trained) -> Outcome {
    let first = t.reports[0].loss;
    let tail = &t.reports[t.reports.len() - 50..];
    let last = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
    ensure!(last < 0.5 * first, "loss {first:.4} → {last:.4}");
    let centroids = dataset::class_means(&t.data, 2);
    let sched = ok(make_schedule(&ScheduleSpec::default(), t.model.shape.scales()))?;
    let per_class = 20;
    let mut correct = 0;
    for label in 0..2 {
        for i in 0..per_class {
            let guidance = GuidanceConfig {
                seed: (label * per_class + i) as u64,
                ..GuidanceConfig::default()
            };
            let g = ok(generate(&t.model, &t.tokenizer, label, &sched, &guidance, &GenerateOptions::default()))?;
            if dataset::nearest_centroid(&g.image, &centroids) == label {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / (2 * per_class) as f64;
    ensure!(acc >= 0.8, "nearest-centroid accuracy {acc:.2}");
    Ok(format!(
        "{} steps in {:.0}s: loss {first:.3} → {last:.3} ({:.0}%); accuracy {correct}/{}",
        t.reports.len(),
        t.seconds,
        100.0 * last / first,
        2 * per_class
    ))
}

// 11. Inpainting fidelity.
fn inpainting(t: &Trained) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = &t.model.shape.hierarchy;
    let sched = ok(make_schedule(&ScheduleSpec::Constant(5), h.len()))?;
    for trial in 0..20 {
        let reference = t.samples[rng.gen_range(0..t.samples.len())].tokens.clone();
        let density = rng.gen_range(0.1..0.9);
        let mask: Vec<Vec<bool>> = h
            .resolutions()
            .iter()
            .map(|&n| (0..n * n).map(|_| rng.gen_bool(density)).collect())
            .collect();
        let edit = EditSpec {
            mask: mask.clone(),
            reference: reference.clone(),
            class_override: Some(rng.gen_range(0..2)),
        };
        let guidance = GuidanceConfig {
            scale: 1.5,
            seed: trial,
            ..GuidanceConfig::default()
        };
        let g = ok(viar_core::sampler::inpaint(&t.model, &t.tokenizer, 0, &edit, &sched, &guidance))?;
        for (k, m) in mask.iter().enumerate() {
            for (i, &gen) in m.iter().enumerate() {
                ensure!(
                    gen || g.tokens.grid(k).indices()[i] == reference.grid(k).indices()[i],
                    "trial {trial}: scale {k} position {i} was not kept"
                );
            }
        }
    }
    let reference = t.samples[0].tokens.clone();
    let none = EditSpec {
        mask: h.resolutions().iter().map(|&n| vec![false; n * n]).collect(),
        reference: reference.clone(),
        class_override: None,
    };
    let g = ok(viar_core::sampler::inpaint(&t.model, &t.tokenizer, 1, &none, &sched, &GuidanceConfig::default()))?;
    ensure!(g.tokens == reference, "all-false mask changed tokens");
    let decoded = ok(t.tokenizer.decode(&reference))?;
    ensure!(g.image == decoded, "all-false mask changed the image");
    Ok("20 random masks keep every out-of-mask token; empty mask reproduces the reference".into())
}

/// Single-stream sampler written against the per-scale primitives.
fn single_stream(t: &Trained, label: usize, steps: usize, seed: u64) -> (TokenHierarchy, Vec<Tensor>) {
    let h = &t.model.shape.hierarchy;
    let mut cache = KvCacheStore::for_model(&t.model);
    let mut rng = rng::substream(seed, streams::SAMPLING);
    let mut tokens = TokenHierarchy::new(Vec::new());
    let mut logits = Vec::new();
    for k in 0..h.len() {
        let out = infer_scale(&t.model, &t.tokenizer.book, &tokens, label, k, &EquilibriumConfig::fixed(steps), &mut cache).unwrap();
        let drawn = sample_tokens(&out.logits, 1.0, 0, &mut rng).unwrap();
        tokens.push(TokenGrid::new(h.side(k), drawn).unwrap());
        logits.push(out.logits);
    }
    (tokens, logits)
}

// 12. Guidance identities.
fn guidance_identities(t: &Trained) -> Outcome {
    let sched = ok(make_schedule(&ScheduleSpec::Constant(6), t.model.shape.scales()))?;
    let null = t.model.embed.cond.null();
    let same = |g: &Generation, (tokens, logits): &(TokenHierarchy, Vec<Tensor>)| {
        g.tokens == *tokens && g.logits.iter().zip(logits).all(|(a, b)| a.bit_eq(b))
    };
    for seed in 0..3 {
        for label in 0..2 {
            let run = |s: f64| {
                generate(&t.model, &t.tokenizer, label, &sched, &GuidanceConfig {
                    scale: s,
                    seed,
                    ..GuidanceConfig::default()
                }, &GenerateOptions::default())
            };
            ensure!(same(&ok(run(1.0))?, &single_stream(t, label, 6, seed)), "s=1 differs (label {label}, seed {seed})");
            ensure!(same(&ok(run(0.0))?, &single_stream(t, null, 6, seed)), "s=0 differs (label {label}, seed {seed})");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let u = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    ensure!(ok(apply_guidance(&c, &u, 1.0))?.bit_eq(&c), "s=1 logit identity");
    ensure!(ok(apply_guidance(&c, &u, 0.0))?.bit_eq(&u), "s=0 logit identity");
    Ok("s=1 ≡ conditional, s=0 ≡ null-conditional, bitwise over 6 runs each".into())
}

// 14. Convergence probe.
fn convergence_probe(t: &Trained) -> Outcome {
    let sched = ok(make_schedule(&ScheduleSpec::Constant(20), t.model.shape.scales()))?;
    let opts = GenerateOptions {
        probe: true,
        ..GenerateOptions::default()
    };
    let g = ok(generate(&t.model, &t.tokenizer, 0, &sched, &GuidanceConfig::default(), &opts))?;
    let last = g.traces.last().expect("scales");
    let rows: usize = g.traces.iter().map(|tr| tr.steps()).sum();
    ensure!(rows == 20 * g.traces.len(), "trace rows {rows}");
    let summary = ok(cosine_probe(last))?;
    ensure!(summary.last_cosine >= 0.99, "final cosine {}", summary.last_cosine);
    ensure!(summary.crossings.len() == 2, "crossings {:?}", summary.crossings);
    let fmt = |c: Option<usize>| c.map_or("none".to_string(), |s| s.to_string());
    Ok(format!(
        "final-scale cosine {:.6}; first crossing ≥0.985 at step {}, ≥0.999 at step {}",
        summary.last_cosine,
        fmt(summary.crossings[0].1),
        fmt(summary.crossings[1].1)
    ))
}

// ---------------------------------------------------------------------------

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {id:>2} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("FAIL {id:>2} {name} ({secs:.1}s): {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let (tx, rx) = mpsc::channel();
    let trainer = std::thread::spawn(move || {
        let t = catch_unwind(train_toy);
        let _ = tx.send(());
        t
    });
    let mut results = vec![
        (1, run(1, "gradient fidelity", gradient_fidelity)),
        (2, run(2, "truncation consistency", truncation_consistency)),
        (3, run(3, "constant training memory", constant_memory)),
        (4, run(4, "fixed-point solver", affine_solver)),
        (8, run(8, "complexity accounting", complexity)),
        (13, run(13, "schedule search", schedule_search)),
    ];
    let _ = rx.recv();
    let trained = match trainer.join().expect("trainer thread") {
        Ok(t) => t,
        Err(_) => {
            for (id, name) in [
                (5, "cache equivalence"),
                (6, "causality"),
                (7, "budget arithmetic"),
                (9, "parameter ratio"),
                (10, "training smoke"),
                (11, "inpainting fidelity"),
                (12, "guidance identities"),
                (14, "convergence probe"),
            ] {
                println!("FAIL {id:>2} {name}: toy training panicked");
                results.push((id, false));
            }
            return ExitCode::FAILURE;
        }
    };
    let t = &trained;
    results.extend([
        (5, run(5, "cache equivalence", || cache_equivalence(t))),
        (6, run(6, "causality", || causality(&t.model, &t.tokenizer, &t.samples))),
        (7, run(7, "budget arithmetic", || budget_arithmetic(&t.model, &t.tokenizer))),
        (9, run(9, "parameter ratio", || parameter_ratio(&t.model))),
        (10, run(10, "training smoke", || training_smoke(t))),
        (11, run(11, "inpainting fidelity", || inpainting(t))),
        (12, run(12, "guidance identities", || guidance_identities(t))),
        (14, run(14, "convergence probe", || convergence_probe(t))),
    ]);
    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
