//! Per-scale iteration schedules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::equilibrium::EquilibriumConfig;
use crate::error::{Error, Result};

/// Unresolved schedule as written on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScheduleSpec {
    /// `con:a,a`: `a` iterations at every scale.
    Constant(usize),
    /// `dec:a,b`: rounded linear ramp from `a` at the coarsest scale to `b`
    /// at the finest, `a ≥ b`.
    Decreasing(usize, usize),
    /// `adaptive:tau,cap`: stop at residual `tau`, at most `cap` steps.
    Adaptive { tau: f64, cap: usize },
    /// Explicit per-scale counts.
    Explicit(Vec<usize>),
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Constant(10)
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Spec(format!("schedule `{s}` is missing `kind:`")))?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        let int = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::Spec(format!("`{p}` is not an iteration count")))
        };
        match (kind.trim(), parts.as_slice()) {
            ("con", [a, b]) => {
                let (a, b) = (int(a)?, int(b)?);
                if a != b {
                    return Err(Error::Spec(format!("constant schedule needs equal endpoints, got {a},{b}")));
                }
                Ok(ScheduleSpec::Constant(a))
            }
            ("dec", [a, b]) => Ok(ScheduleSpec::Decreasing(int(a)?, int(b)?)),
            ("adaptive", [tau, cap]) => Ok(ScheduleSpec::Adaptive {
                tau: tau
                    .parse()
                    .map_err(|_| Error::Spec(format!("`{tau}` is not a threshold")))?,
                cap: int(cap)?,
            }),
            ("explicit", counts) => Ok(ScheduleSpec::Explicit(
                counts.iter().map(|c| int(c)).collect::<Result<_>>()?,
            )),
            _ => Err(Error::Spec(format!("unknown schedule `{s}`"))),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Constant(a) => write!(f, "con:{a},{a}"),
            ScheduleSpec::Decreasing(a, b) => write!(f, "dec:{a},{b}"),
            ScheduleSpec::Adaptive { tau, cap } => write!(f, "adaptive:{tau},{cap}"),
            ScheduleSpec::Explicit(c) => {
                let s: Vec<String> = c.iter().map(usize::to_string).collect();
                write!(f, "explicit:{}", s.join(","))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Constant,
    Decreasing,
    AdaptiveThreshold,
    Explicit,
}

/// Resolved per-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterSchedule {
    pub kind: ScheduleKind,
    /// Iteration counts, or caps for the adaptive kind.
    pub counts: Vec<usize>,
    /// Per-scale residual thresholds for the adaptive kind.
    pub thresholds: Option<Vec<f64>>,
}

impl IterSchedule {
    pub fn scales(&self) -> usize {
        self.counts.len()
    }

    pub fn is_fixed(&self) -> bool {
        self.thresholds.is_none()
    }

    /// Whether every scale runs the same number of iterations.
    pub fn is_uniform(&self) -> bool {
        self.is_fixed() && self.counts.windows(2).all(|w| w[0] == w[1])
    }

    pub fn total_steps(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Solver settings for one scale.
    pub fn solver(&self, scale: usize) -> EquilibriumConfig {
        match &self.thresholds {
            Some(t) => EquilibriumConfig::adaptive(t[scale], self.counts[scale]),
            None => EquilibriumConfig::fixed(self.counts[scale]),
        }
    }

    pub fn adaptive(thresholds: Vec<f64>, cap: usize) -> Result<Self> {
        if cap == 0 || thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::Spec("adaptive schedule needs cap ≥ 1 and thresholds ≥ 0".into()));
        }
        Ok(Self {
            kind: ScheduleKind::AdaptiveThreshold,
            counts: vec![cap; thresholds.len()],
            thresholds: Some(thresholds),
        })
    }

    pub fn explicit(counts: Vec<usize>) -> Result<Self> {
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Spec(format!("iteration counts must be ≥ 1: {counts:?}")));
        }
        Ok(Self {
            kind: ScheduleKind::Explicit,
            counts,
            thresholds: None,
        })
    }
}

/// Resolves a spec for `scales` scales.
pub fn make_schedule(spec: &ScheduleSpec, scales: usize) -> Result<IterSchedule> {
    if scales == 0 {
        return Err(Error::Spec("schedule for zero scales".into()));
    }
    let sched = match spec {
        ScheduleSpec::Constant(a) => IterSchedule {
            kind: ScheduleKind::Constant,
            counts: vec![*a; scales],
            thresholds: None,
        },
        ScheduleSpec::Decreasing(a, b) => {
            if b > a {
                return Err(Error::Spec(format!(
                    "decreasing schedule needs a ≥ b, got {a},{b}"
                )));
            }
            let counts = (0..scales)
                .map(|k| {
                    if scales == 1 {
                        *a
                    } else {
                        let t = k as f64 / (scales - 1) as f64;
                        (*a as f64 + (*b as f64 - *a as f64) * t).round() as usize
                    }
                })
                .collect();
            IterSchedule {
                kind: ScheduleKind::Decreasing,
                counts,
                thresholds: None,
            }
        }
        ScheduleSpec::Adaptive { tau, cap } => IterSchedule::adaptive(vec![*tau; scales], *cap)?,
        ScheduleSpec::Explicit(c) => {
            if c.len() != scales {
                return Err(Error::Spec(format!(
                    "explicit schedule has {} counts for {scales} scales",
                    c.len()
                )));
            }
            IterSchedule::explicit(c.clone())?
        }
    };
    if sched.counts.iter().any(|&c| c == 0) {
        return Err(Error::Spec(format!(
            "iteration counts must be ≥ 1, got {:?}",
            sched.counts
        )));
    }
    Ok(sched)
}

/// The six schedules tabulated by the bench command.
pub fn bench_schedules() -> Vec<ScheduleSpec> {
    vec![
        ScheduleSpec::Constant(10),
        ScheduleSpec::Decreasing(20, 5),
        ScheduleSpec::Decreasing(20, 10),
        ScheduleSpec::Decreasing(10, 5),
        ScheduleSpec::Constant(20),
        ScheduleSpec::Constant(5),
    ]
}
