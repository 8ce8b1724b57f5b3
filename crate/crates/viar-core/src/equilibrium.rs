//! The weight-tied implicit layer and its fixed-point solver.
//!
//! One equilibrium step is `G(z) = block(fuse(z, x_inj), c)`, where `fuse`
//! is a two-layer GELU MLP over the channel-wise concatenation of the
//! state and the input injection. The solver runs damped Picard iteration
//! with no gradient tracking and records residuals and cosine similarities
//! of consecutive iterates.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::backbone::{init_normal, transformer_block, AttnContext, BlockOut, BlockParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor};

/// Thresholds reported by [`cosine_probe`].
pub const PROBE_THRESHOLDS: [f64; 2] = [0.985, 0.999];

/// `W2·gelu(W1·[z, x_inj] + b1) + b2` with `W1: 2D→2D`, `W2: 2D→D`.
///
/// Weights are stored input-major (`in × out`) so rows multiply on the left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionProjection {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FusionProjection {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init_normal(rng, &[2 * dim, 2 * dim], std)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[2 * dim])),
            w2: store.add(format!("{prefix}.w2"), init_normal(rng, &[2 * dim, dim], std)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn count(dim: usize) -> usize {
        4 * dim * dim + 2 * dim + 2 * dim * dim + dim
    }

    pub fn fuse<G: Graph>(&self, g: &mut G, z: &G::Node, x_inj: &G::Node) -> Result<G::Node> {
        if g.value(z).shape() != g.value(x_inj).shape() {
            return Err(Error::shape("fuse", g.value(z).shape(), g.value(x_inj).shape()));
        }
        let cat = g.concat_cols(z, x_inj)?;
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.matmul(&cat, &w1)?;
        let h = g.add_bias(&h, &b1)?;
        let h = g.gelu(&h);
        let out = g.matmul(&h, &w2)?;
        g.add_bias(&out, &b2)
    }
}

/// Fusion projection followed by one transformer block, applied repeatedly
/// with shared weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImplicitLayer {
    pub fusion: FusionProjection,
    pub block: BlockParams,
}

impl ImplicitLayer {
    /// One equilibrium step `z' = block(fuse(z, x_inj), c)`.
    pub fn step<G: Graph>(
        &self,
        g: &mut G,
        z: &G::Node,
        x_inj: &G::Node,
        cond: &G::Node,
        ctx: &AttnContext,
    ) -> Result<BlockOut<G::Node>> {
        let fused = self.fusion.fuse(g, z, x_inj)?;
        transformer_block(g, &self.block, &fused, cond, ctx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumConfig {
    pub max_iters: usize,
    /// Stop once `‖z_{t+1} − z_t‖₂ ≤ residual_tol`.
    pub residual_tol: f64,
    /// Step size `α` in `z ← (1−α)z + α·G(z)`.
    pub damping: f64,
    /// Keep every iterate in the trace.
    pub probe_enabled: bool,
}

impl EquilibriumConfig {
    /// Exactly `iters` undamped steps.
    pub fn fixed(iters: usize) -> Self {
        Self {
            max_iters: iters,
            residual_tol: 0.0,
            damping: 1.0,
            probe_enabled: false,
        }
    }

    /// Up to `cap` steps, stopping at residual `tol`.
    pub fn adaptive(tol: f64, cap: usize) -> Self {
        Self {
            max_iters: cap,
            residual_tol: tol,
            damping: 1.0,
            probe_enabled: false,
        }
    }

    pub fn with_probe(mut self, on: bool) -> Self {
        self.probe_enabled = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!(
                "damping {} outside (0, 1]",
                self.damping
            )));
        }
        if self.residual_tol.is_nan() || self.residual_tol < 0.0 {
            return Err(Error::Config("residual tolerance must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Per-step residual norms and cosine similarities of consecutive iterates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    pub residuals: Vec<f64>,
    pub cosines: Vec<f64>,
    /// `z_0, z_1, …` when probing is enabled.
    pub iterates: Vec<Tensor>,
}

impl IterationTrace {
    pub fn steps(&self) -> usize {
        self.residuals.len()
    }

    fn record(&mut self, prev: &Tensor, next: &Tensor) {
        let mut diff = 0.0;
        for (a, b) in next.data().iter().zip(prev.data()) {
            diff += (a - b) * (a - b);
        }
        self.residuals.push(diff.sqrt());
        self.cosines.push(cosine(prev, next));
    }

    /// JSON-lines rows `{scale, step, residual, cosine}`.
    pub fn write_jsonl(&self, scale: usize, mut w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            scale: usize,
            step: usize,
            residual: f64,
            cosine: f64,
        }
        for (i, (&residual, &cosine)) in self.residuals.iter().zip(&self.cosines).enumerate() {
            let row = Row {
                scale,
                step: i + 1,
                residual,
                cosine,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Cosine similarity of two flattened states; two zero states count as
/// identical, one zero state as orthogonal.
pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumState {
    pub z: Tensor,
    pub x_inj: Tensor,
    pub trace: IterationTrace,
}

impl EquilibriumState {
    /// Warm start: `z ← x`, with `x` cloned as the injection.
    pub fn warm_start(x: Tensor) -> Self {
        Self {
            z: x.clone(),
            x_inj: x,
            trace: IterationTrace::default(),
        }
    }
}

/// Runs `z ← (1−α)z + α·G(z)` until `max_iters` steps or the residual falls
/// to the tolerance.
///
/// `op` receives the current state and the 1-based iteration index.
pub fn solve_fixed_point(
    mut state: EquilibriumState,
    cfg: &EquilibriumConfig,
    mut op: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<EquilibriumState> {
    cfg.validate()?;
    if cfg.probe_enabled {
        state.trace.iterates.push(state.z.clone());
    }
    for t in 1..=cfg.max_iters {
        let g = op(&state.z, t)?;
        if g.shape() != state.z.shape() {
            return Err(Error::shape("fixed point", g.shape(), state.z.shape()));
        }
        let next = if cfg.damping == 1.0 {
            g
        } else {
            let a = cfg.damping;
            state.z.zip_map(&g, |z, gz| (1.0 - a) * z + a * gz)?
        };
        if !next.is_finite() {
            state.trace.residuals.push(f64::NAN);
            state.trace.cosines.push(f64::NAN);
            return Err(Error::Divergence { trace: state.trace });
        }
        state.trace.record(&state.z, &next);
        if cfg.probe_enabled {
            state.trace.iterates.push(next.clone());
        }
        state.z = next;
        if state.trace.residuals[t - 1] <= cfg.residual_tol {
            break;
        }
    }
    Ok(state)
}

/// Summary of a cosine trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub steps: usize,
    pub last_cosine: f64,
    /// `(threshold, first 1-based step with cosine ≥ threshold)`.
    pub crossings: Vec<(f64, Option<usize>)>,
}

pub fn cosine_probe(trace: &IterationTrace) -> Result<ProbeSummary> {
    cosine_probe_with(trace, &PROBE_THRESHOLDS)
}

pub fn cosine_probe_with(trace: &IterationTrace, thresholds: &[f64]) -> Result<ProbeSummary> {
    let Some(&last) = trace.cosines.last() else {
        return Err(Error::Contract("cosine probe on an empty trace".into()));
    };
    let crossings = thresholds
        .iter()
        .map(|&th| (th, trace.cosines.iter().position(|&c| c >= th).map(|i| i + 1)))
        .collect();
    Ok(ProbeSummary {
        steps: trace.steps(),
        last_cosine: last,
        crossings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(b: &Tensor) -> impl FnMut(&Tensor, usize) -> Result<Tensor> + '_ {
        move |z, _| z.zip_map(b, |zv, bv| 0.5 * zv + bv)
    }

    #[test]
    fn constant_operator_reaches_fixed_point_in_one_step() {
        let b = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let s = EquilibriumState::warm_start(Tensor::zeros(&[3]));
        let out = solve_fixed_point(s, &EquilibriumConfig::fixed(2), |_, _| Ok(b.clone())).unwrap();
        assert!(out.z.bit_eq(&b));
        assert_eq!(out.trace.residuals[1], 0.0);
        assert!((out.trace.residuals[0] - b.norm()).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_rejected() {
        let s = EquilibriumState::warm_start(Tensor::zeros(&[1]));
        assert!(solve_fixed_point(s, &EquilibriumConfig::fixed(0), |z, _| Ok(z.clone())).is_err());
    }

    #[test]
    fn affine_contraction_closed_form() {
        // Dyadic data keeps every iterate exact, so residual ratios are exact too.
        let b = Tensor::vector(vec![0.25, -0.75, 1.0, 0.5]);
        let x = Tensor::vector(vec![1.0, 1.0, -1.0, 0.0]);
        let s = EquilibriumState::warm_start(x.clone());
        let out = solve_fixed_point(s, &EquilibriumConfig::fixed(30).with_probe(true), affine(&b)).unwrap();
        let star = b.map(|v| 2.0 * v);
        assert!(out.z.zip_map(&star, |a, c| a - c).unwrap().norm() <= 1e-8);
        for w in out.trace.residuals.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-9);
        }
        let generic = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]);
        let s = EquilibriumState::warm_start(x.clone());
        let out2 = solve_fixed_point(s, &EquilibriumConfig::fixed(30), affine(&generic)).unwrap();
        for w in out2.trace.residuals.windows(2).filter(|w| w[1] > 1e-6) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-9);
        }
        // Closed-form iterates z_t = z* + 0.5^t (x − z*).
        let iterate = |t: i32| x.zip_map(&star, |xv, sv| sv + 0.5f64.powi(t) * (xv - sv)).unwrap();
        for t in 1..=10 {
            let want = cosine(&iterate(t - 1), &iterate(t));
            assert!((out.trace.cosines[t as usize - 1] - want).abs() < 1e-12);
        }
        // Residuals recomputed from stored iterates.
        for (t, r) in out.trace.residuals.iter().enumerate() {
            let d = out.trace.iterates[t + 1].zip_map(&out.trace.iterates[t], |a, c| a - c).unwrap();
            assert_eq!(d.norm(), *r);
        }
        assert_eq!(x, out.x_inj);
    }

    #[test]
    fn budget_exhaustion_with_zero_tolerance() {
        let b = Tensor::vector(vec![1.0]);
        let s = EquilibriumState::warm_start(Tensor::zeros(&[1]));
        let out = solve_fixed_point(s, &EquilibriumConfig::fixed(10), affine(&b)).unwrap();
        assert_eq!(out.trace.steps(), 10);
        assert_eq!(out.trace.cosines.len(), 10);
    }

    #[test]
    fn infinite_threshold_stops_after_one_step() {
        let b = Tensor::vector(vec![1.0]);
        let s = EquilibriumState::warm_start(Tensor::zeros(&[1]));
        let cfg = EquilibriumConfig::adaptive(f64::INFINITY, 50);
        let out = solve_fixed_point(s, &cfg, affine(&b)).unwrap();
        assert_eq!(out.trace.steps(), 1);
    }

    #[test]
    fn damping_slows_the_contraction() {
        let b = Tensor::vector(vec![1.0, 2.0]);
        let s = EquilibriumState::warm_start(Tensor::zeros(&[2]));
        let mut cfg = EquilibriumConfig::fixed(20);
        cfg.damping = 0.5;
        let out = solve_fixed_point(s, &cfg, affine(&b)).unwrap();
        // Effective map z ← 0.75 z + 0.5 b.
        for w in out.trace.residuals.windows(2) {
            assert!((w[1] / w[0] - 0.75).abs() < 1e-9);
        }
        cfg.damping = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_is_an_error_with_trace() {
        let s = EquilibriumState::warm_start(Tensor::vector(vec![1.0]));
        let err = solve_fixed_point(s, &EquilibriumConfig::fixed(5000), |z, _| Ok(z.map(|v| v * 1e300)))
            .unwrap_err();
        match err {
            Error::Divergence { trace } => assert!(trace.steps() >= 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn probe_reports_crossings() {
        let stationary = IterationTrace {
            residuals: vec![0.0, 0.0],
            cosines: vec![1.0, 1.0],
            iterates: vec![],
        };
        let s = cosine_probe(&stationary).unwrap();
        assert_eq!(s.crossings, vec![(0.985, Some(1)), (0.999, Some(1))]);
        let orth = cosine(&Tensor::vector(vec![1.0, 0.0]), &Tensor::vector(vec![0.0, 3.0]));
        assert_eq!(orth, 0.0);
        let rising = IterationTrace {
            residuals: vec![1.0; 4],
            cosines: vec![0.5, 0.99, 0.995, 0.9995],
            iterates: vec![],
        };
        let s = cosine_probe(&rising).unwrap();
        assert_eq!(s.crossings, vec![(0.985, Some(2)), (0.999, Some(4))]);
        assert!(cosine_probe(&IterationTrace::default()).is_err());
    }

    #[test]
    fn trace_jsonl_rows() {
        let t = IterationTrace {
            residuals: vec![0.5, 0.25],
            cosines: vec![0.9, 0.99],
            iterates: vec![],
        };
        let mut buf = Vec::new();
        t.write_jsonl(3, &mut buf).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["scale"], 3);
        assert_eq!(lines[1]["step"], 2);
        assert_eq!(lines[1]["residual"], 0.25);
    }

    fn fusion_fixture(std: f64) -> (ParamStore, FusionProjection) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = FusionProjection::init(&mut store, "fuse", 3, std, &mut rng);
        (store, f)
    }

    #[test]
    fn zero_fusion_outputs_zero() {
        let (store, f) = fusion_fixture(0.0);
        let mut g = Eager::new(&store);
        let z = Tensor::full(&[2, 3], 1.5);
        let out = f.fuse(&mut g, &z, &z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(f.fuse(&mut g, &z, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn symmetric_fusion_weights_commute_halves() {
        // W1 rows for the z half equal the rows for the x_inj half, so
        // swapping the inputs leaves the output unchanged.
        let (mut store, f) = fusion_fixture(0.5);
        let w1 = store.get(f.w1).clone();
        let d = 3;
        let mut sym = w1.to_vec();
        for r in 0..d {
            for c in 0..2 * d {
                sym[(r + d) * 2 * d + c] = w1.get(r, c);
            }
        }
        store.set(f.w1, Tensor::matrix(2 * d, 2 * d, sym).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = init_normal(&mut rng, &[2, 3], 1.0);
        let b = init_normal(&mut rng, &[2, 3], 1.0);
        let mut g = Eager::new(&store);
        let ab = f.fuse(&mut g, &a, &b).unwrap();
        let ba = f.fuse(&mut g, &b, &a).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-14);
    }

    #[test]
    fn fusion_matches_direct_formula() {
        let (store, f) = fusion_fixture(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = init_normal(&mut rng, &[2, 3], 1.0);
        let x = init_normal(&mut rng, &[2, 3], 1.0);
        let mut g = Eager::new(&store);
        let out = f.fuse(&mut g, &z, &x).unwrap();
        let (w1, w2) = (store.get(f.w1), store.get(f.w2));
        let gelu = |v: f64| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        for r in 0..2 {
            let cat: Vec<f64> = z.row(r).iter().chain(x.row(r)).copied().collect();
            let hidden: Vec<f64> = (0..6)
                .map(|j| gelu((0..6).map(|i| cat[i] * w1.get(i, j)).sum::<f64>()))
                .collect();
            for c in 0..3 {
                let want: f64 = (0..6).map(|j| hidden[j] * w2.get(j, c)).sum();
                assert!((out.get(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn implicit_step_composes_and_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fusion = FusionProjection::init(&mut store, "f", 4, 0.3, &mut rng);
        let block = BlockParams::init(&mut store, "imp", 4, 2, 0.3, &mut rng).unwrap();
        let layer = ImplicitLayer { fusion, block };
        let z = init_normal(&mut rng, &[3, 4], 1.0);
        let x = init_normal(&mut rng, &[3, 4], 1.0);
        let c = init_normal(&mut rng, &[3, 4], 0.2);
        let ctx = AttnContext::default();
        let mut g = Eager::new(&store);
        let a = layer.step(&mut g, &z, &x, &c, &ctx).unwrap().out;
        let b = layer.step(&mut g, &z, &x, &c, &ctx).unwrap().out;
        assert!(a.bit_eq(&b));
        let fused = layer.fusion.fuse(&mut g, &z, &x).unwrap();
        let manual = transformer_block(&mut g, &layer.block, &fused, &c, &ctx).unwrap().out;
        assert!(a.bit_eq(&manual));

        let mut zero = ParamStore::new();
        let fusion = FusionProjection::init(&mut zero, "f", 4, 0.0, &mut rng);
        let block = BlockParams::init(&mut zero, "imp", 4, 2, 0.0, &mut rng).unwrap();
        let layer = ImplicitLayer { fusion, block };
        let mut g = Eager::new(&zero);
        let out = layer.step(&mut g, &z, &x, &c, &ctx).unwrap().out;
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
