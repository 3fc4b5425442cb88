//! Surrogate risk measurement: time-to-collision, time-to-accident (TTA),
//! self-information, risk entropy and Shannon entropy of risk-state counts.
//!
//! Sign convention: TTA = -TTC, so a projected collision `t` seconds ahead is
//! the value `-t`, an accident happens at 0 and "no conflict" is -infinity.

use std::fmt;

use crate::error::{Error, Result};
use crate::state_space::StateSpaceConfig;

/// Tolerance used when checking that probabilities sum to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Position, speed and length of one vehicle at an instant.
///
/// `position` is the rear bumper along the road axis, so the follower's
/// front is at `position + length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub position: f64,
    pub speed: f64,
    pub length: f64,
}

impl KinematicState {
    pub fn new(position: f64, speed: f64, length: f64) -> Result<Self> {
        if !position.is_finite() {
            return Err(Error::Domain(format!("position must be finite, got {position}")));
        }
        if !(speed >= 0.0) || !speed.is_finite() {
            return Err(Error::Domain(format!("speed must be >= 0, got {speed}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Domain(format!("length must be > 0, got {length}")));
        }
        Ok(Self { position, speed, length })
    }
}

/// A time-to-accident measurement in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TtaValue {
    /// Finite TTA, always `<= 0`.
    Finite(f64),
    /// Not on a collision course (TTA = -infinity).
    NoConflict,
}

impl TtaValue {
    pub fn finite(value: f64) -> Result<Self> {
        if value.is_nan() || value > 0.0 {
            return Err(Error::Domain(format!("TTA must be <= 0, got {value}")));
        }
        if value == f64::NEG_INFINITY {
            return Ok(TtaValue::NoConflict);
        }
        Ok(TtaValue::Finite(value))
    }

    pub fn is_no_conflict(&self) -> bool {
        matches!(self, TtaValue::NoConflict)
    }

    /// The value in seconds, with `NoConflict` as negative infinity.
    pub fn seconds(&self) -> f64 {
        match *self {
            TtaValue::Finite(v) => v,
            TtaValue::NoConflict => f64::NEG_INFINITY,
        }
    }
}

impl fmt::Display for TtaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TtaValue::Finite(v) => write!(f, "{v}"),
            TtaValue::NoConflict => f.write_str("-inf"),
        }
    }
}

/// Time-to-collision of `follower` behind `leader`, returned as a TTA.
///
/// Returns `NoConflict` when the follower is not faster than the leader.
pub fn compute_ttc(leader: &KinematicState, follower: &KinematicState) -> Result<TtaValue> {
    let gap = leader.position - follower.position - follower.length;
    if !(gap > 0.0) {
        return Err(Error::Overlap { gap });
    }
    let closing = follower.speed - leader.speed;
    if closing <= 0.0 {
        return Ok(TtaValue::NoConflict);
    }
    Ok(TtaValue::Finite(-gap / closing))
}

/// Shannon self-information `-log2 p` in bits.
pub fn self_information(p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("probability must be in (0, 1], got {p}")));
    }
    // -log2(1) would be -0.0
    Ok(0.0 - p.log2())
}

/// A discrete distribution over TTA values.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaDistribution {
    support: Vec<(TtaValue, f64)>,
}

impl TtaDistribution {
    pub fn new(support: Vec<(TtaValue, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Domain("empty TTA distribution".into()));
        }
        let mut sum = 0.0;
        for &(tta, p) in &support {
            if let TtaValue::Finite(v) = tta {
                if !(v <= 0.0) {
                    return Err(Error::Domain(format!("TTA support value {v} is positive")));
                }
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { support })
    }

    pub fn point(tta: f64) -> Result<Self> {
        Self::new(vec![(TtaValue::finite(tta)?, 1.0)])
    }

    pub fn support(&self) -> &[(TtaValue, f64)] {
        &self.support
    }

    /// Replace every `NoConflict` atom by the finite value `cap`.
    pub fn map_no_conflict(&self, cap: f64) -> Result<Self> {
        let cap = TtaValue::finite(cap)?;
        if cap.is_no_conflict() {
            return Err(Error::Domain("no-conflict cap must be finite".into()));
        }
        let support = self
            .support
            .iter()
            .map(|&(t, p)| (if t.is_no_conflict() { cap } else { t }, p))
            .collect();
        Ok(Self { support })
    }

    /// The mixture `weight * self + (1 - weight) * other`.
    pub fn mixture(&self, weight: f64, other: &TtaDistribution) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Domain(format!("mixture weight {weight} outside [0, 1]")));
        }
        let support = self
            .support
            .iter()
            .map(|&(t, p)| (t, weight * p))
            .chain(other.support.iter().map(|&(t, p)| (t, (1.0 - weight) * p)))
            .collect();
        Ok(Self { support })
    }

    /// Convert state-occupancy counts into a TTA distribution.
    ///
    /// Graded states carry their interval midpoint, state 0 carries
    /// `cfg.no_conflict_cap()` and the accident state `-thrd_deadline / 2`.
    pub fn from_histogram(hist: &StateHistogram, cfg: &StateSpaceConfig) -> Result<Self> {
        let total = hist.total();
        if total == 0 {
            return Err(Error::EmptyHistogram);
        }
        let expected = cfg.d_count() + 2;
        if hist.len() != expected {
            return Err(Error::Mapping(format!(
                "histogram has {} states, state space has {expected}",
                hist.len()
            )));
        }
        let support = hist
            .counts()
            .iter()
            .enumerate()
            .map(|(i, &n)| (TtaValue::Finite(cfg.representative_tta(i)), n as f64 / total as f64))
            .collect();
        Ok(Self { support })
    }
}

/// Risk entropy: the expected TTA of `dist`, in seconds.
pub fn risk_entropy(dist: &TtaDistribution) -> Result<f64> {
    let unbounded: f64 = dist
        .support
        .iter()
        .filter(|(t, _)| t.is_no_conflict())
        .map(|(_, p)| p)
        .sum();
    if unbounded > 0.0 {
        return Err(Error::UnboundedSupport { mass: unbounded });
    }
    Ok(dist.support.iter().map(|(t, p)| t.seconds() * p).sum())
}

/// Occupancy counts, one per state index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateHistogram {
    counts: Vec<u64>,
}

impl StateHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn zeros(states: usize) -> Self {
        Self { counts: vec![0; states] }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, state: usize) {
        if state >= self.counts.len() {
            self.counts.resize(state + 1, 0);
        }
        self.counts[state] += 1;
    }

    pub fn merge(&mut self, other: &StateHistogram) {
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn frequencies(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyHistogram);
        }
        Ok(self.counts.iter().map(|&n| n as f64 / total as f64).collect())
    }

    /// Fraction of observations in states `>= from`.
    pub fn tail_frequency(&self, from: usize) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyHistogram);
        }
        let tail: u64 = self.counts.iter().skip(from).sum();
        Ok(tail as f64 / total as f64)
    }

    /// Highest state index with a nonzero count.
    pub fn max_occupied(&self) -> Option<usize> {
        self.counts.iter().rposition(|&n| n > 0)
    }
}

/// Shannon entropy in bits of the normalized counts.
pub fn shannon_entropy(hist: &StateHistogram) -> Result<f64> {
    let total = hist.total();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let total = total as f64;
    let h: f64 = hist
        .counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Merge states into groups: `merge_map[state]` is the group of `state`.
///
/// Group ids must cover `0..G` without gaps. The result has one bucket per
/// group and the same total.
pub fn coarsen(hist: &StateHistogram, merge_map: &[usize]) -> Result<StateHistogram> {
    if merge_map.len() != hist.len() {
        return Err(Error::Mapping(format!(
            "merge map covers {} states, histogram has {}",
            merge_map.len(),
            hist.len()
        )));
    }
    let groups = merge_map.iter().max().map_or(0, |&g| g + 1);
    let mut counts = vec![0u64; groups];
    let mut used = vec![false; groups];
    for (&g, &n) in merge_map.iter().zip(hist.counts()) {
        counts[g] += n;
        used[g] = true;
    }
    if let Some(missing) = used.iter().position(|u| !u) {
        return Err(Error::Mapping(format!("group {missing} has no member states")));
    }
    Ok(StateHistogram { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn car(position: f64, speed: f64) -> KinematicState {
        KinematicState::new(position, speed, 5.0).unwrap()
    }

    #[test]
    fn ttc_closing() {
        let tta = compute_ttc(&car(100.0, 10.0), &car(50.0, 20.0)).unwrap();
        assert_eq!(tta, TtaValue::Finite(-4.5));
    }

    #[test]
    fn ttc_no_conflict() {
        assert!(compute_ttc(&car(100.0, 15.0), &car(50.0, 15.0)).unwrap().is_no_conflict());
        assert!(compute_ttc(&car(100.0, 20.0), &car(50.0, 10.0)).unwrap().is_no_conflict());
    }

    #[test]
    fn ttc_overlap() {
        let err = compute_ttc(&car(54.0, 10.0), &car(50.0, 20.0)).unwrap_err();
        assert_eq!(err.kind(), "OverlapError");
        assert!(compute_ttc(&car(55.0, 10.0), &car(50.0, 20.0)).is_err());
    }

    #[test]
    fn kinematic_state_validation() {
        assert!(KinematicState::new(0.0, -1.0, 5.0).is_err());
        assert!(KinematicState::new(0.0, 1.0, 0.0).is_err());
        assert!(KinematicState::new(f64::NAN, 1.0, 5.0).is_err());
    }

    #[test]
    fn self_information_values() {
        assert_eq!(self_information(1.0).unwrap(), 0.0);
        assert_eq!(self_information(0.5).unwrap(), 1.0);
        let p = (-2.0f64).exp();
        assert_relative_eq!(self_information(p).unwrap(), 2.0 / std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(self_information(p).unwrap(), 2.8854, epsilon = 1e-4);
        for bad in [0.0, -0.1, 1.0000001, f64::NAN] {
            assert_eq!(self_information(bad).unwrap_err().kind(), "DomainError");
        }
    }

    #[test]
    fn risk_entropy_basic() {
        assert_eq!(risk_entropy(&TtaDistribution::point(-4.5).unwrap()).unwrap(), -4.5);
        let d = TtaDistribution::new(vec![
            (TtaValue::Finite(-2.1), 0.5),
            (TtaValue::Finite(-1.9), 0.5),
        ])
        .unwrap();
        assert_relative_eq!(risk_entropy(&d).unwrap(), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn risk_entropy_needs_mapping() {
        let d = TtaDistribution::new(vec![
            (TtaValue::NoConflict, 0.25),
            (TtaValue::Finite(-1.0), 0.75),
        ])
        .unwrap();
        assert_eq!(risk_entropy(&d).unwrap_err().kind(), "UnboundedSupportError");
        let mapped = d.map_no_conflict(-2.4).unwrap();
        assert_relative_eq!(risk_entropy(&mapped).unwrap(), -0.25 * 2.4 - 0.75, epsilon = 1e-15);
    }

    #[test]
    fn distribution_validation() {
        assert!(TtaDistribution::new(vec![(TtaValue::Finite(-1.0), 0.6)]).is_err());
        assert!(TtaDistribution::new(vec![(TtaValue::Finite(1.0), 1.0)]).is_err());
        assert!(TtaDistribution::new(vec![]).is_err());
    }

    #[test]
    fn shannon_values() {
        assert_eq!(shannon_entropy(&StateHistogram::new(vec![5, 5, 5, 5])).unwrap(), 2.0);
        assert_eq!(shannon_entropy(&StateHistogram::new(vec![0, 9, 0])).unwrap(), 0.0);
        // -(3/4 log2 3/4 + 1/4 log2 1/4)
        let h = shannon_entropy(&StateHistogram::new(vec![3, 1])).unwrap();
        assert_relative_eq!(h, 0.811_278_124_459_132_9, epsilon = 1e-12);
        assert_eq!(
            shannon_entropy(&StateHistogram::new(vec![0, 0])).unwrap_err(),
            Error::EmptyHistogram
        );
    }

    #[test]
    fn coarsen_cases() {
        let h = StateHistogram::new(vec![2, 2, 4]);
        assert_eq!(coarsen(&h, &[0, 1, 2]).unwrap(), h);
        assert_eq!(coarsen(&h, &[0, 0, 0]).unwrap(), StateHistogram::new(vec![8]));
        assert_eq!(coarsen(&h, &[0, 0, 1]).unwrap(), StateHistogram::new(vec![4, 4]));
        assert_eq!(coarsen(&h, &[0, 0]).unwrap_err().kind(), "MappingError");
        assert_eq!(coarsen(&h, &[0, 0, 2]).unwrap_err().kind(), "MappingError");
    }

    #[test]
    fn histogram_helpers() {
        let mut h = StateHistogram::zeros(3);
        h.record(1);
        h.record(1);
        h.record(4);
        assert_eq!(h.counts(), &[0, 2, 0, 0, 1]);
        assert_eq!(h.max_occupied(), Some(4));
        assert_relative_eq!(h.tail_frequency(2).unwrap(), 1.0 / 3.0);
    }
}
