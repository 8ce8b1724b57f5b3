//! Analytical cost models: block-execution budgets, attention operation
//! counts, parameter memory, and budget-constrained schedule search.

use serde::Serialize;

use crate::backbone::BlockParams;
use crate::equilibrium::FusionProjection;
use crate::error::{Error, Result};
use crate::model::{ModelShape, ParamCounts};
use crate::schedule::{IterSchedule, ScheduleKind};
use crate::tokenizer::ScaleHierarchy;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    /// `p + c_k + p` for every scale.
    pub per_scale_blocks: Vec<usize>,
    /// `C = Σ_k (2p + c_k)`.
    pub total: usize,
    pub implicit_steps: usize,
    /// `n_k⁴` per scale, when a hierarchy is attached.
    pub attention_ops: Vec<u128>,
    pub memory: Option<MemoryEstimate>,
}

/// Budget of explicit per-scale counts; `c_k = 0` is accepted here.
pub fn budget_from_counts(counts: &[usize], p: usize) -> BudgetReport {
    let per_scale_blocks: Vec<usize> = counts.iter().map(|c| 2 * p + c).collect();
    BudgetReport {
        total: per_scale_blocks.iter().sum(),
        implicit_steps: counts.iter().sum(),
        per_scale_blocks,
        attention_ops: Vec::new(),
        memory: None,
    }
}

/// Budget of a resolved schedule (caps for adaptive schedules).
pub fn compute_budget(schedule: &IterSchedule, p: usize) -> BudgetReport {
    budget_from_counts(&schedule.counts, p)
}

impl BudgetReport {
    pub fn with_hierarchy(mut self, h: &ScaleHierarchy) -> Self {
        self.attention_ops = h.resolutions().iter().map(|&n| (n as u128).pow(4)).collect();
        self
    }

    pub fn with_memory(mut self, m: MemoryEstimate) -> Self {
        self.memory = Some(m);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AttentionMode {
    /// One token per step, attending to the full prefix without caching.
    Raster,
    /// One parallel pass per scale.
    NextScale,
}

/// `Σ_{t=1}^{n²} t²` for raster order, `Σ_k n_k⁴` for next-scale order.
pub fn attention_op_count(h: &ScaleHierarchy, mode: AttentionMode) -> u128 {
    match mode {
        AttentionMode::Raster => {
            let m = (h.finest() * h.finest()) as u128;
            (1..=m).map(|t| t * t).sum()
        }
        AttentionMode::NextScale => h.resolutions().iter().map(|&n| (n as u128).pow(4)).sum(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
}

/// Parameters, an equal-sized gradient buffer, and two optimizer moments.
pub fn memory_estimate(param_count: usize, precision_bytes: usize) -> MemoryEstimate {
    let p = (param_count * precision_bytes) as u64;
    MemoryEstimate {
        params_bytes: p,
        grads_bytes: p,
        optimizer_bytes: 2 * p,
    }
}

/// Parameter counts of `shape`'s implicit configuration, by enumeration of
/// every tensor the model allocates.
pub fn implicit_param_counts(shape: &ModelShape) -> ParamCounts {
    let d = shape.dim;
    let block = BlockParams::count(d);
    ParamCounts {
        embedding: (shape.classes + 1) * d
            + shape.code_width * d
            + d
            + shape.hierarchy.total_tokens() * d
            + shape.scales() * d,
        pre: shape.depth * block,
        implicit_block: block,
        fusion: FusionProjection::count(d),
        post: shape.depth * block,
        head: d * shape.vocab + shape.vocab,
    }
}

/// The same model with the middle replaced by `depth` explicit blocks.
pub fn explicit_param_counts(shape: &ModelShape, depth: usize) -> ParamCounts {
    ParamCounts {
        implicit_block: depth * BlockParams::count(shape.dim),
        fusion: 0,
        ..implicit_param_counts(shape)
    }
}

/// Per-scale measured loss at candidate iteration counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossProxyCurve {
    /// `points[k]` holds `(c, loss)` pairs for scale `k`.
    pub points: Vec<Vec<(usize, f64)>>,
}

impl LossProxyCurve {
    pub fn new(points: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (k, p) in points.iter().enumerate() {
            if p.len() < 2 {
                return Err(Error::Spec(format!("scale {k} needs at least two measurements")));
            }
            if p.iter().any(|(c, l)| *c == 0 || !l.is_finite()) {
                return Err(Error::Spec(format!("scale {k} has an invalid measurement")));
            }
        }
        Ok(Self { points })
    }

    pub fn scales(&self) -> usize {
        self.points.len()
    }

    /// Costs for `c = 1..=c_max`: piecewise-linear through the measured
    /// points (flat beyond them), then made non-increasing by isotonic
    /// regression.
    pub fn smoothed(&self, scale: usize, c_max: usize) -> Vec<f64> {
        let mut pts = self.points[scale].clone();
        pts.sort_by_key(|p| p.0);
        let raw: Vec<f64> = (1..=c_max)
            .map(|c| {
                if c <= pts[0].0 {
                    return pts[0].1;
                }
                let last = pts[pts.len() - 1];
                if c >= last.0 {
                    return last.1;
                }
                let i = pts.iter().position(|p| p.0 >= c).expect("c below the last point");
                let (c0, l0) = pts[i - 1];
                let (c1, l1) = pts[i];
                if c1 == c0 {
                    return l1;
                }
                l0 + (l1 - l0) * (c - c0) as f64 / (c1 - c0) as f64
            })
            .collect();
        isotonic_non_increasing(&raw)
    }
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
pub fn isotonic_non_increasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let n = na + nb;
            *blocks.last_mut().expect("two blocks") = ((a * na as f64 + b * nb as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat(v).take(n)).collect()
}

/// Minimizes `Σ_k cost_k(c_k)` over integer `c_k ∈ [1, c_max]` subject to
/// `Σ_k (2p + c_k) ≤ budget`. Among optimal allocations the finest scale's
/// count is smallest, then the next finest, and so on.
pub fn optimize_counts(costs: &[Vec<f64>], budget: usize, p: usize) -> Result<Vec<usize>> {
    let k = costs.len();
    let c_max = costs.first().map_or(0, Vec::len);
    if k == 0 || c_max == 0 || costs.iter().any(|c| c.len() != c_max) {
        return Err(Error::Spec("cost tables must be non-empty and equally long".into()));
    }
    let floor = k * (2 * p + 1);
    if budget < floor {
        return Err(Error::Budget(format!(
            "budget {budget} is below the minimum {floor} for {k} scales"
        )));
    }
    let slack = (budget - 2 * p * k).min(k * c_max);
    // best[j][r]: least cost of scales 0..j using at most r steps (∞ when
    // fewer than j steps are available).
    let mut best = vec![vec![f64::INFINITY; slack + 1]; k + 1];
    best[0].iter_mut().for_each(|v| *v = 0.0);
    for j in 0..k {
        for r in 0..=slack {
            let mut m = f64::INFINITY;
            for c in 1..=c_max.min(r) {
                let v = best[j][r - c] + costs[j][c - 1];
                if v < m {
                    m = v;
                }
            }
            best[j + 1][r] = m;
        }
    }
    let mut counts = vec![0; k];
    let mut r = slack;
    for j in (0..k).rev() {
        let target = best[j + 1][r];
        let c = (1..=c_max.min(r))
            .find(|&c| best[j][r - c] + costs[j][c - 1] == target)
            .expect("optimum is attained");
        counts[j] = c;
        r -= c;
    }
    Ok(counts)
}

/// Budget-constrained schedule from measured proxy curves.
pub fn optimize_schedule(
    proxy: &LossProxyCurve,
    budget: usize,
    p: usize,
    c_max: usize,
) -> Result<IterSchedule> {
    let costs: Vec<Vec<f64>> = (0..proxy.scales()).map(|k| proxy.smoothed(k, c_max)).collect();
    let counts = optimize_counts(&costs, budget, p)?;
    Ok(IterSchedule {
        kind: ScheduleKind::Explicit,
        counts,
        thresholds: None,
    })
}
