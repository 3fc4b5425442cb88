//! Discretization of the TTA axis `(-inf, 0]` into risk states.
//!
//! State 0 is `(-inf, -thrd_detect]`, states `1..=D` are the graded conflict
//! intervals of width `sigma`, and state `D + 1` is `(-thrd_deadline, 0]`.
//! All intervals are left-open and right-closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk_metrics::TtaValue;

/// Values this close above an interval boundary count as on the boundary.
/// Keeps decimal thresholds such as 1.4 s in the interval they name despite
/// binary rounding of `-thrd_detect + i * sigma`.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceConfig {
    thrd_detect: f64,
    thrd_conflict: f64,
    thrd_deadline: f64,
    sigma: f64,
    delta: f64,
    d_count: usize,
}

impl Default for StateSpaceConfig {
    /// 2.2 s detection, 0.6 s deadline, 0.2 s intervals, 15 frames/s: states 0..=9.
    fn default() -> Self {
        Self::new(2.2, 1.4, 0.6, 0.2, 1.0 / 15.0).expect("default state space is valid")
    }
}

impl StateSpaceConfig {
    pub fn new(
        thrd_detect: f64,
        thrd_conflict: f64,
        thrd_deadline: f64,
        sigma: f64,
        delta: f64,
    ) -> Result<Self> {
        let all = [thrd_detect, thrd_conflict, thrd_deadline, sigma, delta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("state space parameters must be finite".into()));
        }
        if !(0.0 < thrd_deadline && thrd_deadline < thrd_conflict && thrd_conflict < thrd_detect) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < deadline ({thrd_deadline}) < conflict ({thrd_conflict}) < detect ({thrd_detect})"
            )));
        }
        if !(sigma > 0.0 && delta > 0.0) {
            return Err(Error::Config("sigma and delta must be positive".into()));
        }
        if !(sigma > delta) {
            return Err(Error::Config(format!(
                "interval width sigma ({sigma}) must exceed sampling period delta ({delta})"
            )));
        }
        let span = thrd_detect - thrd_deadline;
        let d = (span / sigma).round();
        if d < 1.0 || (d * sigma - span).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "sigma ({sigma}) does not divide detect - deadline ({span}) into whole intervals"
            )));
        }
        Ok(Self {
            thrd_detect,
            thrd_conflict,
            thrd_deadline,
            sigma,
            delta,
            d_count: d as usize,
        })
    }

    pub fn thrd_detect(&self) -> f64 {
        self.thrd_detect
    }
    pub fn thrd_conflict(&self) -> f64 {
        self.thrd_conflict
    }
    pub fn thrd_deadline(&self) -> f64 {
        self.thrd_deadline
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    /// Number of graded conflict intervals, D.
    pub fn d_count(&self) -> usize {
        self.d_count
    }
    /// Index of the accident state, D + 1.
    pub fn accident_state(&self) -> usize {
        self.d_count + 1
    }
    /// Number of states in S, D + 2.
    pub fn state_count(&self) -> usize {
        self.d_count + 2
    }

    /// Frames per decision epoch, `round(sigma / delta)` and at least 1.
    pub fn frames_per_epoch(&self) -> usize {
        ((self.sigma / self.delta).round() as usize).max(1)
    }

    /// Finite stand-in for TTA = -inf: one interval beyond the detection threshold.
    pub fn no_conflict_cap(&self) -> f64 {
        -self.thrd_detect - self.sigma
    }

    fn upper(&self, i: usize) -> f64 {
        if i == self.d_count {
            -self.thrd_deadline
        } else {
            -self.thrd_detect + i as f64 * self.sigma
        }
    }

    /// TTA value standing for state `i` when converting counts to a distribution.
    pub fn representative_tta(&self, i: usize) -> f64 {
        match i {
            0 => self.no_conflict_cap(),
            i if i <= self.d_count => self.upper(i) - 0.5 * self.sigma,
            _ => -self.thrd_deadline / 2.0,
        }
    }
}

/// A left-open, right-closed TTA interval `(lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, tta: f64) -> bool {
        tta > self.lower + BOUNDARY_EPS && tta <= self.upper + BOUNDARY_EPS
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// The D + 2 intervals of the state space, in state order.
pub fn build_state_space(cfg: &StateSpaceConfig) -> Vec<Interval> {
    let d = cfg.d_count;
    let mut out = Vec::with_capacity(d + 2);
    out.push(Interval { lower: f64::NEG_INFINITY, upper: -cfg.thrd_detect });
    for i in 1..=d {
        out.push(Interval { lower: cfg.upper(i - 1), upper: cfg.upper(i) });
    }
    out.push(Interval { lower: -cfg.thrd_deadline, upper: 0.0 });
    out
}

/// State index of a TTA value.
pub fn tta_to_state(tta: TtaValue, cfg: &StateSpaceConfig) -> Result<usize> {
    let t = match tta {
        TtaValue::NoConflict => return Ok(0),
        TtaValue::Finite(t) => t,
    };
    if t.is_nan() || t > 0.0 {
        return Err(Error::Domain(format!("TTA must be <= 0, got {t}")));
    }
    Ok(state_of_seconds(t, cfg))
}

#[inline]
pub(crate) fn state_of_seconds(t: f64, cfg: &StateSpaceConfig) -> usize {
    if t <= -cfg.thrd_detect + BOUNDARY_EPS {
        return 0;
    }
    if t > -cfg.thrd_deadline + BOUNDARY_EPS {
        return cfg.d_count + 1;
    }
    let d = cfg.d_count;
    let k = ((t + cfg.thrd_detect - BOUNDARY_EPS) / cfg.sigma).ceil();
    let mut k = (k.max(1.0) as usize).min(d);
    // settle rounding at the boundaries with the same comparisons as Interval::contains
    while k > 1 && t <= cfg.upper(k - 1) + BOUNDARY_EPS {
        k -= 1;
    }
    while k < d && t > cfg.upper(k) + BOUNDARY_EPS {
        k += 1;
    }
    k
}

/// Conflict row index `c` for a TTC threshold of `c_seconds`.
///
/// The state whose interval contains `-c_seconds`, but never below state 1:
/// `-thrd_detect` itself sits in state 0 and state 0 cannot be a conflict row.
pub fn threshold_to_state(c_seconds: f64, cfg: &StateSpaceConfig) -> Result<usize> {
    if !(c_seconds > cfg.thrd_deadline && c_seconds <= cfg.thrd_detect + BOUNDARY_EPS) {
        return Err(Error::Domain(format!(
            "TTC threshold {c_seconds} s outside ({}, {}]",
            cfg.thrd_deadline, cfg.thrd_detect
        )));
    }
    Ok(state_of_seconds(-c_seconds, cfg).clamp(1, cfg.d_count))
}
