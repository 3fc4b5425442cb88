//! Exit distribution and exit time of the risk-state chain.
//!
//! `h(x)` is the probability of reaching the accident state before the trip
//! terminal state, starting from `x` (extended chain). `g(x)` is the expected
//! number of steps to the accident state (modified chain, where the accident
//! state is the only absorbing state). Both come from first-step analysis and
//! are solved as dense linear systems over the transient states.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov_model::{MatrixKind, TransitionMatrix};

/// Condition numbers above this are logged as a warning.
pub const CONDITION_WARN: f64 = 1e12;

/// Per-state accident probabilities and expected accident times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSolution {
    /// `h(x)` over the extended chain's D + 3 states.
    pub h: Vec<f64>,
    /// `g(x)` in steps over the modified chain's D + 2 states.
    pub g: Vec<f64>,
    /// Seconds per chain step.
    pub delta: f64,
}

impl ExitSolution {
    pub fn compute(extended: &TransitionMatrix, modified: &TransitionMatrix, delta: f64) -> Result<Self> {
        Ok(Self {
            h: exit_probability(extended)?,
            g: exit_time(modified)?,
            delta,
        })
    }

    /// Expected time to the accident state from journey start, in seconds.
    pub fn g0_seconds(&self) -> f64 {
        self.g[0] * self.delta
    }

    pub fn accident_frequency_per_hour(&self) -> Result<f64> {
        accident_frequency(self.g[0], self.delta)
    }
}

fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let norm1 = |m: &DMatrix<f64>| {
        m.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let a_norm = norm1(&a);
    let lu = a.lu();
    let x = lu.solve(&b)?;
    if let Some(inv) = lu.try_inverse() {
        let cond = a_norm * norm1(&inv);
        if cond > CONDITION_WARN {
            log::warn!("ill-conditioned exit system: cond_1 = {cond:.3e}");
        }
    }
    Some(x)
}

/// Solve `(I - Q) x = b` restricted to `states`, where `Q` is `m` on those states.
fn solve_restricted(m: &TransitionMatrix, states: &[usize], rhs: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
    let n = states.len();
    let a = DMatrix::from_fn(n, n, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - m.get(states[r], states[c])
    });
    let b = DVector::from_fn(n, |r, _| rhs(states[r]));
    solve_dense(a, b).map(|x| x.iter().copied().collect())
}

fn require_kind(m: &TransitionMatrix, allowed: &[MatrixKind], what: &str) -> Result<()> {
    if allowed.contains(&m.kind()) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} is not defined for a {:?} matrix", m.kind())))
    }
}

/// Accident probability `h(x)` for every state of an extended matrix.
///
/// States that cannot reach the accident state get `h = 0`; the rest solve
/// `h(x) = sum_y p(x, y) h(y)` with `h(D+1) = 1` and `h(D+2) = 0`.
pub fn exit_probability(ed: &TransitionMatrix) -> Result<Vec<f64>> {
    require_kind(ed, &[MatrixKind::Extended], "exit probability")?;
    let accident = ed.accident_state();
    let terminal = ed.terminal_state().expect("extended matrix has a terminal state");
    let n = ed.dimension();
    let exits = ed.can_reach(&[accident, terminal]);
    if (0..accident).all(|x| !exits[x]) {
        return Err(Error::NoExit);
    }
    let to_accident = ed.can_reach(&[accident]);
    let live: Vec<usize> = (0..accident).filter(|&x| to_accident[x]).collect();

    let mut h = vec![0.0; n];
    h[accident] = 1.0;
    if !live.is_empty() {
        let sol = solve_restricted(ed, &live, |x| ed.get(x, accident)).ok_or(Error::NoExit)?;
        for (&x, v) in live.iter().zip(sol) {
            h[x] = v.clamp(0.0, 1.0);
        }
    }
    Ok(h)
}

/// Expected steps `g(x)` to the accident state on a modified (or ideal) matrix.
///
/// Fails with `InfiniteExitTime` if some state cannot reach the accident state.
pub fn exit_time(d: &TransitionMatrix) -> Result<Vec<f64>> {
    require_kind(d, &[MatrixKind::Modified, MatrixKind::Ideal], "exit time")?;
    let accident = d.accident_state();
    let reach = d.can_reach(&[accident]);
    if let Some(state) = reach.iter().position(|r| !r) {
        return Err(Error::InfiniteExitTime { state });
    }
    let others: Vec<usize> = (0..d.dimension()).filter(|&x| x != accident).collect();
    let sol = solve_restricted(d, &others, |_| 1.0).ok_or(Error::InfiniteExitTime { state: 0 })?;
    let mut g = vec![0.0; d.dimension()];
    for (&x, v) in others.iter().zip(sol) {
        g[x] = v;
    }
    Ok(g)
}

/// Expected steps to the accident state given that the accident comes before
/// the trip ends, on an extended matrix. `None` where `h(x) = 0`.
///
/// Solves `(I - Q) u = h` for `u(x) = E_x[T_accident; accident first]` and
/// returns `u / h`.
pub fn conditional_exit_time(ed: &TransitionMatrix) -> Result<Vec<Option<f64>>> {
    let h = exit_probability(ed)?;
    let accident = ed.accident_state();
    let live: Vec<usize> = (0..accident).filter(|&x| h[x] > 0.0).collect();
    let mut out: Vec<Option<f64>> = vec![None; ed.dimension()];
    out[accident] = Some(0.0);
    if !live.is_empty() {
        let u = solve_restricted(ed, &live, |x| h[x]).ok_or(Error::NoExit)?;
        for (&x, ux) in live.iter().zip(u) {
            out[x] = Some(ux / h[x]);
        }
    }
    Ok(out)
}

/// Accident events per hour for a mean exit time of `g0_steps` steps of `delta` seconds.
pub fn accident_frequency(g0_steps: f64, delta: f64) -> Result<f64> {
    if !(g0_steps > 0.0 && g0_steps.is_finite()) {
        return Err(Error::Domain(format!("exit time must be positive, got {g0_steps}")));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    Ok(3600.0 / (g0_steps * delta))
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Number of samples behind the mean.
    pub runs: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct McOptions {
    /// Walks longer than this fail with `NonAbsorption`.
    pub step_cap: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { step_cap: 100_000_000, workers: None }
    }
}

/// Walks are grouped into blocks of this many replications for parallelism.
const BLOCK: u64 = 4096;

/// Walks advanced side by side within a block.
const LANES: usize = 8;

struct Lane {
    rng: Xoshiro256PlusPlus,
    state: usize,
    steps: u64,
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `index` under master seed `seed`.
pub fn replication_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Integer sufficient statistics, merged by addition in any order.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    walks: u64,
    accidents: u64,
    steps: u128,
    steps_sq: u128,
}

impl Tally {
    fn merge(self, o: Tally) -> Tally {
        Tally {
            walks: self.walks + o.walks,
            accidents: self.accidents + o.accidents,
            steps: self.steps + o.steps,
            steps_sq: self.steps_sq + o.steps_sq,
        }
    }
}

fn estimate(n: u64, sum: u128, sum_sq: u128, seed: u64) -> McEstimate {
    if n == 0 {
        return McEstimate { mean: f64::NAN, std_error: f64::NAN, runs: 0, seed };
    }
    let mean = sum as f64 / n as f64;
    let std_error = if n > 1 {
        let nn = n as u128;
        let spread = (nn * sum_sq).saturating_sub(sum * sum) as f64;
        (spread / (n as f64 * (n - 1) as f64) / n as f64).sqrt()
    } else {
        0.0
    };
    McEstimate { mean, std_error, runs: n, seed }
}

/// Rows of at most this many nonzeros use a branch-free lookup.
const NARROW: usize = 4;

struct WalkTable {
    /// Per state: cumulative probabilities scaled to 2^64 (padded with
    /// `u64::MAX`) and the matching next states, for narrow rows.
    narrow: Vec<([u64; NARROW - 1], [usize; NARROW])>,
    /// Flattened (scaled cumulative, next) pairs of every row; row `i` is
    /// `entries[start[i]..start[i + 1]]`. Used when some row is wider.
    entries: Vec<(u64, usize)>,
    start: Vec<usize>,
    all_narrow: bool,
    absorbing: Vec<bool>,
}

impl WalkTable {
    fn new(m: &TransitionMatrix) -> Self {
        let n = m.dimension();
        let mut entries = Vec::new();
        let mut start = Vec::with_capacity(n + 1);
        let mut narrow = Vec::with_capacity(n);
        let mut absorbing = vec![false; n];
        for i in 0..n {
            start.push(entries.len());
            absorbing[i] = m.get(i, i) == 1.0;
            let mut acc = 0.0;
            for j in m.support(i) {
                acc += m.get(i, j);
                // float-to-int casts saturate, so acc >= 1 maps to u64::MAX
                entries.push(((acc * 18_446_744_073_709_551_616.0) as u64, j));
            }
            let row = &entries[start[i]..];
            let mut cum = [u64::MAX; NARROW - 1];
            let mut next = [row.last().map_or(i, |e| e.1); NARROW];
            for (k, &(c, j)) in row.iter().enumerate().take(NARROW) {
                if k < NARROW - 1 {
                    cum[k] = c;
                }
                next[k] = j;
            }
            narrow.push((cum, next));
        }
        start.push(entries.len());
        let all_narrow = (0..n).all(|i| start[i + 1] - start[i] <= NARROW);
        Self { narrow, entries, start, all_narrow, absorbing }
    }

    #[inline]
    fn next<R: RngCore>(&self, state: usize, rng: &mut R) -> usize {
        let u = rng.next_u64();
        if self.all_narrow {
            let (cum, next) = &self.narrow[state];
            let k = cum.iter().map(|&c| (u >= c) as usize).sum::<usize>();
            return next[k];
        }
        let row = &self.entries[self.start[state]..self.start[state + 1]];
        let (last, head) = row.split_last().expect("stochastic rows are non-empty");
        for &(cum, j) in head {
            if u < cum {
                return j;
            }
        }
        last.1
    }
}

/// Brute-force chain walks from `start` until absorption.
///
/// Returns `(h_hat, g_hat)`: the fraction of walks absorbed at the accident
/// state, and the mean number of steps to the accident among those walks.
/// Replication `i` draws from its own generator seeded by
/// [`replication_seed`], and blocks are merged through integer sums, so the
/// result depends only on `(m, start, runs, seed)`.
pub fn mc_exit_oracle(
    m: &TransitionMatrix,
    start: usize,
    runs: u64,
    seed: u64,
    opts: &McOptions,
) -> Result<(McEstimate, McEstimate)> {
    if runs == 0 {
        return Err(Error::Domain("Monte Carlo needs at least one run".into()));
    }
    if start >= m.dimension() {
        return Err(Error::Domain(format!("start state {start} out of range")));
    }
    let table = WalkTable::new(m);
    let accident = m.accident_state();
    let cap = opts.step_cap;

    let new_lane = |index: u64| Lane {
        rng: Xoshiro256PlusPlus::seed_from_u64(replication_seed(seed, index)),
        state: start,
        steps: 0,
    };

    // Each worker advances several walks in turn so their table lookups
    // overlap; every walk keeps its own generator, so the interleaving does
    // not change any walk.
    let run_block = |b: u64| -> Result<Tally> {
        let mut t = Tally::default();
        let end = ((b + 1) * BLOCK).min(runs);
        let mut next_index = b * BLOCK;
        let mut lanes: Vec<Lane> = Vec::with_capacity(LANES);
        while lanes.len() < LANES && next_index < end {
            lanes.push(new_lane(next_index));
            next_index += 1;
        }
        while !lanes.is_empty() {
            let mut i = 0;
            while i < lanes.len() {
                let lane = &mut lanes[i];
                if table.absorbing[lane.state] {
                    t.walks += 1;
                    if lane.state == accident {
                        let s = lane.steps as u128;
                        t.accidents += 1;
                        t.steps += s;
                        t.steps_sq += s * s;
                    }
                    if next_index < end {
                        *lane = new_lane(next_index);
                        next_index += 1;
                    } else {
                        lanes.swap_remove(i);
                        continue;
                    }
                } else if lane.steps >= cap {
                    return Err(Error::NonAbsorption { start, cap });
                } else {
                    lane.state = table.next(lane.state, &mut lane.rng);
                    lane.steps += 1;
                }
                i += 1;
            }
        }
        Ok(t)
    };

    let blocks = runs.div_ceil(BLOCK);
    let run_blocks = || {
        (0..blocks)
            .into_par_iter()
            .map(run_block)
            .try_reduce(Tally::default, |a, b| Ok(a.merge(b)))
    };
    let tally = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run_blocks)?,
        None => run_blocks()?,
    };

    let k = tally.accidents as u128;
    let h_hat = estimate(tally.walks, k, k, seed);
    let g_hat = estimate(tally.accidents, tally.steps, tally.steps_sq, seed);
    Ok((h_hat, g_hat))
}

/// Max over transient `x` of `|h(x) - sum_y p(x, y) h(y)|`.
pub fn harmonic_residual(m: &TransitionMatrix, h: &[f64], transient: &[usize]) -> f64 {
    transient
        .iter()
        .map(|&x| {
            let s: f64 = (0..m.dimension()).map(|y| m.get(x, y) * h[y]).sum();
            (h[x] - s).abs()
        })
        .fold(0.0, f64::max)
}

/// Max over `x != accident` of `|g(x) - 1 - sum_y p(x, y) g(y)|`.
pub fn exit_time_residual(m: &TransitionMatrix, g: &[f64]) -> f64 {
    let accident = m.accident_state();
    (0..m.dimension())
        .filter(|&x| x != accident)
        .map(|x| {
            let s: f64 = (0..m.dimension()).map(|y| m.get(x, y) * g[y]).sum();
            (g[x] - 1.0 - s).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov_model::{build_extended_from_probs, build_modified_matrix, ChainParams};
    use approx::assert_relative_eq;

    #[test]
    fn toy_geometric_exit_time() {
        let m = TransitionMatrix::from_rows(MatrixKind::Modified, vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let g = exit_time(&m).unwrap();
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-14);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn deterministic_walk() {
        // 0 -> 1 -> 2 (accident)
        let m = TransitionMatrix::from_rows(
            MatrixKind::Modified,
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let (h, g) = mc_exit_oracle(&m, 0, 1000, 7, &McOptions::default()).unwrap();
        assert_eq!(h.mean, 1.0);
        assert_eq!(h.std_error, 0.0);
        assert_eq!(g.mean, 2.0);
        assert_eq!(g.std_error, 0.0);
        assert_eq!(exit_time(&m).unwrap(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn same_seed_same_estimate() {
        let p = ChainParams::new(0.05, 0.3, 3, 4).unwrap();
        let m = build_extended_from_probs(&p, 0.2, 0.8, 0.05).unwrap();
        let a = mc_exit_oracle(&m, 0, 20_000, 42, &McOptions::default()).unwrap();
        let b = mc_exit_oracle(&m, 0, 20_000, 42, &McOptions::default()).unwrap();
        assert_eq!(a, b);
        let c = mc_exit_oracle(&m, 0, 20_000, 43, &McOptions::default()).unwrap();
        assert_ne!(a.0.mean, c.0.mean);
    }

    #[test]
    fn worker_count_does_not_change_estimates() {
        let p = ChainParams::new(0.05, 0.3, 3, 4).unwrap();
        let m = build_extended_from_probs(&p, 0.2, 0.8, 0.05).unwrap();
        let one = McOptions { workers: Some(1), ..Default::default() };
        let four = McOptions { workers: Some(4), ..Default::default() };
        assert_eq!(
            mc_exit_oracle(&m, 0, 30_000, 9, &one).unwrap(),
            mc_exit_oracle(&m, 0, 30_000, 9, &four).unwrap()
        );
    }

    #[test]
    fn step_cap() {
        let p = ChainParams::new(0.01, 0.3, 2, 6).unwrap();
        let m = build_modified_matrix(&p, 0.5, 0.5).unwrap();
        let opts = McOptions { step_cap: 10, workers: None };
        let err = mc_exit_oracle(&m, 0, 100, 1, &opts).unwrap_err();
        assert_eq!(err.kind(), "NonAbsorptionError");
    }

    #[test]
    fn boundaries_and_unreachable_accident() {
        let p = ChainParams::new(0.0, 0.34, 4, 8).unwrap();
        let m = build_extended_from_probs(&p, 0.1, 0.9, 0.01).unwrap();
        let h = exit_probability(&m).unwrap();
        assert_eq!(h[9], 1.0);
        assert_eq!(h[10], 0.0);
        assert!(h[..9].iter().all(|&v| v == 0.0));

        let d = build_modified_matrix(&p, 0.1, 0.9).unwrap();
        assert_eq!(exit_time(&d).unwrap_err().kind(), "InfiniteExitTimeError");
    }

    #[test]
    fn no_exit_at_all() {
        let p = ChainParams::new(0.0, 0.34, 4, 8).unwrap();
        let m = build_extended_from_probs(&p, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(exit_probability(&m).unwrap_err(), Error::NoExit);
    }

    #[test]
    fn wrong_kinds() {
        let p = ChainParams::new(0.02, 0.34, 4, 8).unwrap();
        let d = build_modified_matrix(&p, 0.1, 0.9).unwrap();
        assert_eq!(exit_probability(&d).unwrap_err().kind(), "ConfigError");
        let e = build_extended_from_probs(&p, 0.1, 0.9, 0.01).unwrap();
        assert_eq!(exit_time(&e).unwrap_err().kind(), "ConfigError");
    }

    #[test]
    fn frequency() {
        assert_relative_eq!(accident_frequency(54_000.0, 1.0 / 15.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(accident_frequency(108_000.0, 1.0 / 15.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(accident_frequency(0.0, 0.1).unwrap_err().kind(), "DomainError");
        assert!(accident_frequency(-3.0, 0.1).is_err());
    }

    #[test]
    fn conditional_time_on_two_step_chain() {
        // 0 -> accident (0.3), terminal (0.7); accident comes after exactly one step
        let m = TransitionMatrix::from_rows(
            MatrixKind::Extended,
            vec![
                vec![0.0, 0.0, 0.3, 0.7],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
        )
        .unwrap();
        let h = exit_probability(&m).unwrap();
        assert_relative_eq!(h[0], 0.3, epsilon = 1e-15);
        let t = conditional_exit_time(&m).unwrap();
        assert_relative_eq!(t[0].unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(t[1], None);
    }
}
