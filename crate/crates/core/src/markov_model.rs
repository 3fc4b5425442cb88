//! Risk-state transition matrices.
//!
//! Three shapes over the states of the discretized TTA space:
//!
//! * `Ideal`: error- and delay-free decision logic. Tension rows `1..c`
//!   advance one state, the conflict row `c` stays put, relaxation rows
//!   `c+1..=D` retreat one state.
//! * `Modified`: tension rows `(alpha, beta, 1-gamma)`, conflict row
//!   `(gamma/2, 1-gamma, gamma/2)`, relaxation rows `(1-gamma, beta, alpha)`.
//! * `Extended`: `Modified` plus a trip-terminal state `D+2` entered from
//!   state 0 with probability `p3`.
//!
//! Row 0 is `(p0, q0)` in every shape, with `p0 = P(u_smooth > u_max)` taken
//! from the traffic environment.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::risk_metrics::PROB_SUM_TOL;

/// Error and delay probabilities plus the conflict row of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    alpha: f64,
    beta: f64,
    c: usize,
    d_count: usize,
}

impl ChainParams {
    pub fn new(alpha: f64, beta: f64, c: usize, d_count: usize) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha ({alpha}) and beta ({beta}) must be non-negative"
            )));
        }
        if !(alpha + beta <= 1.0) {
            return Err(Error::Config(format!("gamma = alpha + beta = {} exceeds 1", alpha + beta)));
        }
        if d_count == 0 {
            return Err(Error::Config("D must be at least 1".into()));
        }
        if !(1..=d_count).contains(&c) {
            return Err(Error::Config(format!("conflict row c = {c} outside 1..={d_count}")));
        }
        Ok(Self { alpha, beta, c, d_count })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn gamma(&self) -> f64 {
        self.alpha + self.beta
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn d_count(&self) -> usize {
        self.d_count
    }
}

/// Traffic conditions on the road section (Greenshields fundamental diagram).
///
/// Speeds in km/h, densities in veh/km, flows in veh/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficEnv {
    pub flow_q: f64,
    pub density_k: f64,
    pub u_max: f64,
    pub u_free: f64,
    pub k_jam: f64,
    pub speed_noise_sd: f64,
}

impl TrafficEnv {
    pub const DEFAULT_U_MAX: f64 = 60.0;
    pub const DEFAULT_U_FREE: f64 = 60.0;
    pub const DEFAULT_K_JAM: f64 = 120.0;
    pub const DEFAULT_NOISE_SD: f64 = 5.0;

    /// Environment at the uncongested density carrying `flow_q`.
    pub fn from_flow(flow_q: f64, u_max: f64, u_free: f64, k_jam: f64, speed_noise_sd: f64) -> Result<Self> {
        let mut env = Self { flow_q: 0.0, density_k: 0.0, u_max, u_free, k_jam, speed_noise_sd };
        env.check_road()?;
        env.density_k = env.flow_to_density(flow_q)?;
        env.flow_q = flow_q;
        Ok(env)
    }

    pub fn from_density(density_k: f64, u_max: f64, u_free: f64, k_jam: f64, speed_noise_sd: f64) -> Result<Self> {
        let mut env = Self { flow_q: 0.0, density_k, u_max, u_free, k_jam, speed_noise_sd };
        env.check_road()?;
        env.flow_q = density_k * env.equilibrium_speed(density_k)?;
        Ok(env)
    }

    /// Default road (60 km/h limit, 120 veh/km jam density) at `flow_q`.
    pub fn with_flow(flow_q: f64) -> Result<Self> {
        Self::from_flow(flow_q, Self::DEFAULT_U_MAX, Self::DEFAULT_U_FREE, Self::DEFAULT_K_JAM, Self::DEFAULT_NOISE_SD)
    }

    fn check_road(&self) -> Result<()> {
        if !(self.u_free > 0.0 && self.u_max > 0.0 && self.k_jam > 0.0) {
            return Err(Error::Config("u_free, u_max and k_jam must be positive".into()));
        }
        if !(self.speed_noise_sd >= 0.0) {
            return Err(Error::Config("speed noise sd must be non-negative".into()));
        }
        Ok(())
    }

    /// Road capacity `u_free * k_jam / 4`.
    pub fn capacity(&self) -> f64 {
        self.u_free * self.k_jam / 4.0
    }

    /// Greenshields equilibrium speed `u_free * (1 - k / k_jam)`.
    pub fn equilibrium_speed(&self, k: f64) -> Result<f64> {
        if !(0.0..=self.k_jam).contains(&k) {
            return Err(Error::Domain(format!("density {k} outside [0, {}]", self.k_jam)));
        }
        Ok(self.u_free * (1.0 - k / self.k_jam))
    }

    /// Uncongested root of `q = k * u_e(k)`.
    pub fn flow_to_density(&self, q: f64) -> Result<f64> {
        let cap = self.capacity();
        if !(q >= 0.0) {
            return Err(Error::Domain(format!("flow must be non-negative, got {q}")));
        }
        if q > cap * (1.0 + 1e-12) {
            return Err(Error::InfeasibleFlow { flow: q, capacity: cap });
        }
        // k^2 - k_jam k + q k_jam / u_free = 0; the rationalized form of the
        // smaller root stays accurate for q near 0.
        let disc = (self.k_jam * self.k_jam - 4.0 * q * self.k_jam / self.u_free).max(0.0);
        let c = q * self.k_jam / self.u_free;
        let denom = 0.5 * (self.k_jam + disc.sqrt());
        Ok(if denom > 0.0 { c / denom } else { 0.0 })
    }

    /// `(p0, q0)`: probability the smooth speed exceeds the limit, and its complement.
    pub fn free_state_probs(&self) -> Result<(f64, f64)> {
        let mean = self.equilibrium_speed(self.density_k)?;
        let p0 = if self.speed_noise_sd == 0.0 {
            if mean > self.u_max {
                1.0
            } else {
                0.0
            }
        } else {
            let n = Normal::new(mean, self.speed_noise_sd)
                .map_err(|e| Error::Config(e.to_string()))?;
            n.sf(self.u_max)
        };
        Ok((p0, 1.0 - p0))
    }
}

/// Probability that a trip ends in one chain step, for a geometric trip length
/// with mean `section_length_m / mean_speed`.
pub fn trip_end_probability(section_length_m: f64, mean_speed_kmh: f64, delta_s: f64) -> Result<f64> {
    if !(section_length_m > 0.0 && mean_speed_kmh > 0.0 && delta_s > 0.0) {
        return Err(Error::Domain("section length, speed and delta must be positive".into()));
    }
    let mean_trip_s = section_length_m / (mean_speed_kmh / 3.6);
    Ok((delta_s / mean_trip_s).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatrixKind {
    Ideal,
    Modified,
    Extended,
}

/// A dense row-stochastic matrix over risk states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    kind: MatrixKind,
    dimension: usize,
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    /// Build from explicit rows, checking shape and stochasticity.
    pub fn from_rows(kind: MatrixKind, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("matrix has no rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Config(format!("row {i} has entry {p} outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Config(format!("row {i} sums to {s}")));
            }
        }
        if kind == MatrixKind::Extended && n < 4 {
            return Err(Error::Config("extended matrix needs at least 4 states".into()));
        }
        Ok(Self { kind, dimension: n, rows })
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }
    pub fn dimension(&self) -> usize {
        self.dimension
    }
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    /// Index of the accident state D + 1.
    pub fn accident_state(&self) -> usize {
        match self.kind {
            MatrixKind::Extended => self.dimension - 2,
            _ => self.dimension - 1,
        }
    }

    /// Index of the trip-terminal state D + 2, extended matrices only.
    pub fn terminal_state(&self) -> Option<usize> {
        (self.kind == MatrixKind::Extended).then(|| self.dimension - 1)
    }

    /// Nonzero columns of row `i`.
    pub fn support(&self, i: usize) -> Vec<usize> {
        self.rows[i]
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TransitionMatrix =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("matrix JSON: {e}")))?;
        if raw.dimension != raw.rows.len() {
            return Err(Error::Parse(format!(
                "matrix JSON: dimension {} but {} rows",
                raw.dimension,
                raw.rows.len()
            )));
        }
        Self::from_rows(raw.kind, raw.rows)
    }

    /// States reachable from `from` in zero or more steps.
    pub(crate) fn reachable_from(&self, from: usize) -> Vec<bool> {
        let mut seen = vec![false; self.dimension];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(i) = queue.pop_front() {
            for (j, &p) in self.rows[i].iter().enumerate() {
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    /// States that can reach any state in `targets`.
    pub(crate) fn can_reach(&self, targets: &[usize]) -> Vec<bool> {
        let n = self.dimension;
        let mut ok = vec![false; n];
        let mut queue = VecDeque::new();
        for &t in targets {
            ok[t] = true;
            queue.push_back(t);
        }
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !ok[i] && self.rows[i][j] > 0.0 {
                    ok[i] = true;
                    queue.push_back(i);
                }
            }
        }
        ok
    }
}

fn check_free_probs(p0: f64, q0: f64) -> Result<()> {
    if !((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&q0)) || (p0 + q0 - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Config(format!("p0 = {p0}, q0 = {q0} do not form a distribution")));
    }
    Ok(())
}

/// Error- and delay-free transition matrix of dimension D + 2.
pub fn build_ideal_matrix(params: &ChainParams, p0: f64, q0: f64) -> Result<TransitionMatrix> {
    check_free_probs(p0, q0)?;
    let (c, d) = (params.c, params.d_count);
    let n = d + 2;
    let mut rows = vec![vec![0.0; n]; n];
    rows[0][0] = p0;
    rows[0][1] = q0;
    for i in 1..c {
        rows[i][i + 1] = 1.0;
    }
    rows[c][c] = 1.0;
    for i in c + 1..=d {
        rows[i][i - 1] = 1.0;
    }
    rows[d + 1][d + 1] = 1.0;
    TransitionMatrix::from_rows(MatrixKind::Ideal, rows)
}

fn fill_modified_rows(rows: &mut [Vec<f64>], params: &ChainParams) {
    let (a, b, g) = (params.alpha, params.beta, params.gamma());
    let (c, d) = (params.c, params.d_count);
    for i in 1..c {
        rows[i][i - 1] += a;
        rows[i][i] += b;
        rows[i][i + 1] += 1.0 - g;
    }
    rows[c][c - 1] += g / 2.0;
    rows[c][c] += 1.0 - g;
    rows[c][c + 1] += g / 2.0;
    for i in c + 1..=d {
        rows[i][i - 1] += 1.0 - g;
        rows[i][i] += b;
        rows[i][i + 1] += a;
    }
    rows[d + 1][d + 1] = 1.0;
}

/// Transition matrix with error probability alpha and delay probability beta,
/// dimension D + 2.
pub fn build_modified_matrix(params: &ChainParams, p0: f64, q0: f64) -> Result<TransitionMatrix> {
    check_free_probs(p0, q0)?;
    let n = params.d_count + 2;
    let mut rows = vec![vec![0.0; n]; n];
    rows[0][0] = p0;
    rows[0][1] = q0;
    fill_modified_rows(&mut rows, params);
    TransitionMatrix::from_rows(MatrixKind::Modified, rows)
}

/// Modified matrix with the trip-terminal state D + 2 appended.
///
/// Row 0 becomes `(p0 (1 - p3), q0 (1 - p3), ..., p3)`.
pub fn build_extended_matrix(params: &ChainParams, env: &TrafficEnv, p3: f64) -> Result<TransitionMatrix> {
    if !(0.0..1.0).contains(&p3) {
        return Err(Error::Config(format!("trip-end probability p3 = {p3} outside [0, 1)")));
    }
    let (p0, q0) = env.free_state_probs()?;
    build_extended_from_probs(params, p0, q0, p3)
}

/// [`build_extended_matrix`] with `(p0, q0)` supplied directly.
pub fn build_extended_from_probs(params: &ChainParams, p0: f64, q0: f64, p3: f64) -> Result<TransitionMatrix> {
    check_free_probs(p0, q0)?;
    if !(0.0..1.0).contains(&p3) {
        return Err(Error::Config(format!("trip-end probability p3 = {p3} outside [0, 1)")));
    }
    let n = params.d_count + 3;
    let mut rows = vec![vec![0.0; n]; n];
    rows[0][0] = p0 * (1.0 - p3);
    rows[0][1] = q0 * (1.0 - p3);
    rows[0][n - 1] = p3;
    fill_modified_rows(&mut rows, params);
    rows[n - 1][n - 1] = 1.0;
    TransitionMatrix::from_rows(MatrixKind::Extended, rows)
}

/// Sequence of modified matrices for a density trace, one per time step.
pub fn modified_matrices_for_trace(
    params: &ChainParams,
    base: &TrafficEnv,
    densities: &[f64],
) -> Result<Vec<TransitionMatrix>> {
    densities
        .iter()
        .map(|&k| {
            let env = TrafficEnv::from_density(k, base.u_max, base.u_free, base.k_jam, base.speed_noise_sd)?;
            let (p0, q0) = env.free_state_probs()?;
            build_modified_matrix(params, p0, q0)
        })
        .collect()
}

/// Partition of the states into transient and recurrent sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateClasses {
    pub transient: Vec<usize>,
    pub recurrent: Vec<usize>,
}

/// Communicating-class analysis: a state is recurrent iff its class is closed,
/// i.e. every state reachable from it can reach it back.
pub fn classify_states(m: &TransitionMatrix) -> StateClasses {
    let n = m.dimension();
    let reach: Vec<Vec<bool>> = (0..n).map(|i| m.reachable_from(i)).collect();
    let mut out = StateClasses { transient: Vec::new(), recurrent: Vec::new() };
    for i in 0..n {
        let closed = (0..n).all(|j| !reach[i][j] || reach[j][i]);
        if closed {
            out.recurrent.push(i);
        } else {
            out.transient.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(c: usize) -> ChainParams {
        ChainParams::new(0.02, 0.34, c, 8).unwrap()
    }

    #[test]
    fn greenshields_speed() {
        let env = TrafficEnv::with_flow(0.0).unwrap();
        assert_eq!(env.equilibrium_speed(0.0).unwrap(), 60.0);
        assert_eq!(env.equilibrium_speed(120.0).unwrap(), 0.0);
        assert_eq!(env.equilibrium_speed(60.0).unwrap(), 30.0);
        assert_eq!(env.equilibrium_speed(121.0).unwrap_err().kind(), "DomainError");
        assert!(env.equilibrium_speed(-1.0).is_err());
    }

    #[test]
    fn flow_density_roots() {
        let env = TrafficEnv::with_flow(0.0).unwrap();
        assert_eq!(env.flow_to_density(0.0).unwrap(), 0.0);
        assert_relative_eq!(env.flow_to_density(1800.0).unwrap(), 60.0, epsilon = 1e-9);
        // smaller root of k^2 - 120 k + 3000 = 0
        let k = env.flow_to_density(1500.0).unwrap();
        assert_relative_eq!(k, 60.0 - 600f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(k, 35.51, epsilon = 5e-3);
        assert_eq!(env.flow_to_density(1801.0).unwrap_err().kind(), "InfeasibleFlowError");
    }

    #[test]
    fn free_probs() {
        let deterministic = |k: f64| {
            TrafficEnv::from_density(k, 60.0, 80.0, 120.0, 0.0).unwrap().free_state_probs().unwrap()
        };
        assert_eq!(deterministic(0.0), (1.0, 0.0));
        assert_eq!(deterministic(60.0), (0.0, 1.0));
        let at_limit = TrafficEnv::from_density(0.0, 60.0, 60.0, 120.0, 5.0).unwrap();
        let (p0, q0) = at_limit.free_state_probs().unwrap();
        assert_relative_eq!(p0, 0.5, epsilon = 1e-12);
        assert_relative_eq!(q0, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn trip_end() {
        let p3 = trip_end_probability(807.0, 54.0, 1.0 / 15.0).unwrap();
        assert_relative_eq!(807.0 / 15.0, 53.8, epsilon = 1e-12);
        assert_relative_eq!(p3, (1.0 / 15.0) / 53.8, epsilon = 1e-15);
        assert_relative_eq!(p3, 1.24e-3, epsilon = 1e-5);
    }

    #[test]
    fn ideal_pattern() {
        let m = build_ideal_matrix(&params(4), 0.3, 0.7).unwrap();
        assert_eq!(m.dimension(), 10);
        assert_eq!(m.rows()[0][..2], [0.3, 0.7]);
        assert_eq!(m.support(2), vec![3]);
        assert_eq!(m.support(4), vec![4]);
        assert_eq!(m.support(6), vec![5]);
        assert_eq!(m.support(9), vec![9]);
        assert_eq!(m.get(9, 9), 1.0);
    }

    #[test]
    fn modified_rows() {
        let m = build_modified_matrix(&params(4), 0.0, 1.0).unwrap();
        assert_eq!(m.get(1, 0), 0.02);
        assert_eq!(m.get(1, 1), 0.34);
        assert_relative_eq!(m.get(1, 2), 0.64, epsilon = 1e-15);
        for (j, want) in [(3, 0.18), (4, 0.64), (5, 0.18)] {
            assert_relative_eq!(m.get(4, j), want, epsilon = 1e-15);
        }
        assert_relative_eq!(m.get(6, 5), 0.64, epsilon = 1e-15);
        assert_eq!(m.get(6, 6), 0.34);
        assert_eq!(m.get(6, 7), 0.02);
        assert_eq!(m.get(8, 9), 0.02);
        assert_eq!(m.support(9), vec![9]);
    }

    #[test]
    fn modified_without_errors_is_ideal_off_the_conflict_row() {
        let p = ChainParams::new(0.0, 0.0, 4, 8).unwrap();
        let ideal = build_ideal_matrix(&p, 0.2, 0.8).unwrap();
        let modified = build_modified_matrix(&p, 0.2, 0.8).unwrap();
        for i in 0..10 {
            assert_eq!(ideal.rows()[i], modified.rows()[i], "row {i}");
        }
    }

    #[test]
    fn extended_rows() {
        let env = TrafficEnv::with_flow(1500.0).unwrap();
        let m = build_extended_matrix(&params(4), &env, 1e-3).unwrap();
        assert_eq!(m.dimension(), 11);
        let (p0, q0) = env.free_state_probs().unwrap();
        assert_relative_eq!(m.get(0, 0), p0 * (1.0 - 1e-3));
        assert_relative_eq!(m.get(0, 1), q0 * (1.0 - 1e-3));
        assert_eq!(m.get(0, 10), 1e-3);
        assert_eq!(m.support(9), vec![9]);
        assert_eq!(m.support(10), vec![10]);
        assert_eq!(m.accident_state(), 9);
        assert_eq!(m.terminal_state(), Some(10));
        assert!(build_extended_matrix(&params(4), &env, 1.0).is_err());
    }

    #[test]
    fn param_validation() {
        assert!(ChainParams::new(0.7, 0.4, 4, 8).is_err());
        assert!(ChainParams::new(0.02, 0.34, 0, 8).is_err());
        assert!(ChainParams::new(0.02, 0.34, 9, 8).is_err());
        assert!(ChainParams::new(-0.1, 0.34, 4, 8).is_err());
    }

    #[test]
    fn classes() {
        let env = TrafficEnv::with_flow(1500.0).unwrap();
        let ext = build_extended_matrix(&params(4), &env, 1e-3).unwrap();
        let cls = classify_states(&ext);
        assert_eq!(cls.recurrent, vec![9, 10]);
        assert_eq!(cls.transient, (0..9).collect::<Vec<_>>());

        let (p0, q0) = env.free_state_probs().unwrap();
        let m = build_modified_matrix(&params(4), p0, q0).unwrap();
        let cls = classify_states(&m);
        assert_eq!(cls.recurrent, vec![9]);
        assert_eq!(cls.transient, (0..9).collect::<Vec<_>>());

        let one = TransitionMatrix::from_rows(MatrixKind::Ideal, vec![vec![1.0]]).unwrap();
        let cls = classify_states(&one);
        assert_eq!(cls.recurrent, vec![0]);
        assert!(cls.transient.is_empty());
    }

    #[test]
    fn json_round_trip() {
        let m = build_modified_matrix(&params(3), 0.25, 0.75).unwrap();
        let text = m.to_json();
        assert!(text.contains("\"kind\": \"MODIFIED\""));
        assert_eq!(TransitionMatrix::from_json(&text).unwrap(), m);
        assert!(TransitionMatrix::from_json("{\"kind\":\"IDEAL\",\"dimension\":2,\"rows\":[[1.0]]}").is_err());
    }

    #[test]
    fn density_trace() {
        let base = TrafficEnv::with_flow(1500.0).unwrap();
        let ms = modified_matrices_for_trace(&params(4), &base, &[0.0, 30.0, 90.0]).unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms[0].get(0, 0) > ms[1].get(0, 0));
        assert!(ms[1].get(0, 0) > ms[2].get(0, 0));
    }
}
