use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ttarisk::exit_analysis::{self, ExitSolution, McOptions};
use ttarisk::markov_model::{self, ChainParams, MatrixKind, TrafficEnv, TransitionMatrix};
use ttarisk::risk_metrics::{self, KinematicState, StateHistogram, TtaDistribution, TtaValue};
use ttarisk::sim::{self, RunOptions, SimSettings, TaskSpec};
use ttarisk::state_space::{self, StateSpaceConfig};

fn to_py(e: ttarisk::Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    if e.is_user_error() || matches!(e, ttarisk::Error::Domain(_)) {
        PyValueError::new_err(msg)
    } else {
        PyRuntimeError::new_err(msg)
    }
}

/// Discretized TTA state space.
#[pyclass(frozen)]
struct StateSpace {
    inner: StateSpaceConfig,
}

#[pymethods]
impl StateSpace {
    #[new]
    #[pyo3(signature = (thrd_detect=2.2, thrd_conflict=1.4, thrd_deadline=0.6, sigma=0.2, delta=1.0/15.0))]
    fn new(thrd_detect: f64, thrd_conflict: f64, thrd_deadline: f64, sigma: f64, delta: f64) -> PyResult<Self> {
        let inner = StateSpaceConfig::new(thrd_detect, thrd_conflict, thrd_deadline, sigma, delta).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d_count(&self) -> usize {
        self.inner.d_count()
    }

    #[getter]
    fn accident_state(&self) -> usize {
        self.inner.accident_state()
    }

    /// State of a TTA value; `None` means no conflict.
    #[pyo3(signature = (tta))]
    fn tta_to_state(&self, tta: Option<f64>) -> PyResult<usize> {
        let value = match tta {
            Some(t) => TtaValue::finite(t).map_err(to_py)?,
            None => TtaValue::NoConflict,
        };
        state_space::tta_to_state(value, &self.inner).map_err(to_py)
    }

    fn threshold_to_state(&self, c_seconds: f64) -> PyResult<usize> {
        state_space::threshold_to_state(c_seconds, &self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "StateSpace(thrd_detect={}, thrd_conflict={}, thrd_deadline={}, sigma={}, delta={})",
            self.inner.thrd_detect(),
            self.inner.thrd_conflict(),
            self.inner.thrd_deadline(),
            self.inner.sigma(),
            self.inner.delta()
        )
    }
}

fn space_or_default(space: Option<&StateSpace>) -> StateSpaceConfig {
    space.map(|s| s.inner).unwrap_or_default()
}

/// TTA of a follower behind a leader; `None` when they are not closing in.
#[pyfunction]
#[pyo3(signature = (leader_position, leader_speed, follower_position, follower_speed, length=5.0))]
fn compute_tta(
    leader_position: f64,
    leader_speed: f64,
    follower_position: f64,
    follower_speed: f64,
    length: f64,
) -> PyResult<Option<f64>> {
    let leader = KinematicState::new(leader_position, leader_speed, length).map_err(to_py)?;
    let follower = KinematicState::new(follower_position, follower_speed, length).map_err(to_py)?;
    let tta = risk_metrics::compute_ttc(&leader, &follower).map_err(to_py)?;
    Ok((!tta.is_no_conflict()).then(|| tta.seconds()))
}

#[pyfunction]
fn shannon_entropy(counts: Vec<u64>) -> PyResult<f64> {
    risk_metrics::shannon_entropy(&StateHistogram::new(counts)).map_err(to_py)
}

/// Expected TTA in seconds of a state histogram.
#[pyfunction]
#[pyo3(signature = (counts, space=None))]
fn risk_entropy(counts: Vec<u64>, space: Option<&StateSpace>) -> PyResult<f64> {
    let hist = StateHistogram::new(counts);
    let dist = TtaDistribution::from_histogram(&hist, &space_or_default(space)).map_err(to_py)?;
    risk_metrics::risk_entropy(&dist).map_err(to_py)
}

#[pyfunction]
fn coarsen(counts: Vec<u64>, merge_map: Vec<usize>) -> PyResult<Vec<u64>> {
    let merged = risk_metrics::coarsen(&StateHistogram::new(counts), &merge_map).map_err(to_py)?;
    Ok(merged.counts().to_vec())
}

fn parse_kind(kind: &str) -> PyResult<MatrixKind> {
    match kind.to_ascii_lowercase().as_str() {
        "ideal" => Ok(MatrixKind::Ideal),
        "modified" => Ok(MatrixKind::Modified),
        "extended" => Ok(MatrixKind::Extended),
        _ => Err(PyValueError::new_err(format!("unknown matrix kind {kind:?}"))),
    }
}

fn default_p3(env: &TrafficEnv, delta: f64) -> PyResult<f64> {
    let speed = env.equilibrium_speed(env.density_k).map_err(to_py)?;
    markov_model::trip_end_probability(TaskSpec::SECTION_LENGTH_M, speed, delta).map_err(to_py)
}

fn build(kind: MatrixKind, params: &ChainParams, env: &TrafficEnv, p3: f64) -> PyResult<TransitionMatrix> {
    let (p0, q0) = env.free_state_probs().map_err(to_py)?;
    match kind {
        MatrixKind::Ideal => markov_model::build_ideal_matrix(params, p0, q0),
        MatrixKind::Modified => markov_model::build_modified_matrix(params, p0, q0),
        MatrixKind::Extended => markov_model::build_extended_from_probs(params, p0, q0, p3),
    }
    .map_err(to_py)
}

/// Transition matrix rows for the given chain at traffic flow `flow` (veh/h).
#[pyfunction]
#[pyo3(signature = (kind, alpha=0.02, beta=0.34, c=4, d_count=8, flow=1500.0, p3=None, delta=1.0/15.0))]
fn transition_matrix(
    kind: &str,
    alpha: f64,
    beta: f64,
    c: usize,
    d_count: usize,
    flow: f64,
    p3: Option<f64>,
    delta: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let params = ChainParams::new(alpha, beta, c, d_count).map_err(to_py)?;
    let env = TrafficEnv::with_flow(flow).map_err(to_py)?;
    let p3 = match p3 {
        Some(p) => p,
        None => default_p3(&env, delta)?,
    };
    Ok(build(parse_kind(kind)?, &params, &env, p3)?.rows().to_vec())
}

/// Exit distribution and exit time of a chain.
#[pyclass(frozen, get_all)]
struct Solution {
    h: Vec<f64>,
    g: Vec<f64>,
    accident_frequency_per_hour: f64,
    p3: f64,
}

#[pymethods]
impl Solution {
    fn __repr__(&self) -> String {
        format!(
            "Solution(h0={}, g0={}, accident_frequency_per_hour={})",
            self.h[0], self.g[0], self.accident_frequency_per_hour
        )
    }
}

#[pyfunction]
#[pyo3(signature = (alpha=0.02, beta=0.34, c=4, d_count=8, flow=1500.0, p3=None, delta=1.0/15.0))]
fn solve(alpha: f64, beta: f64, c: usize, d_count: usize, flow: f64, p3: Option<f64>, delta: f64) -> PyResult<Solution> {
    let params = ChainParams::new(alpha, beta, c, d_count).map_err(to_py)?;
    let env = TrafficEnv::with_flow(flow).map_err(to_py)?;
    let p3 = match p3 {
        Some(p) => p,
        None => default_p3(&env, delta)?,
    };
    let extended = build(MatrixKind::Extended, &params, &env, p3)?;
    let modified = build(MatrixKind::Modified, &params, &env, p3)?;
    let sol = ExitSolution::compute(&extended, &modified, delta).map_err(to_py)?;
    Ok(Solution {
        accident_frequency_per_hour: sol.accident_frequency_per_hour().map_err(to_py)?,
        h: sol.h,
        g: sol.g,
        p3,
    })
}

#[pyclass(frozen, get_all)]
struct Estimate {
    mean: f64,
    std_error: f64,
    runs: u64,
}

#[pymethods]
impl Estimate {
    fn __repr__(&self) -> String {
        format!("Estimate(mean={}, std_error={}, runs={})", self.mean, self.std_error, self.runs)
    }
}

impl From<exit_analysis::McEstimate> for Estimate {
    fn from(e: exit_analysis::McEstimate) -> Self {
        Self { mean: e.mean, std_error: e.std_error, runs: e.runs }
    }
}

/// Monte Carlo estimates of the accident probability and the time to absorption.
#[pyfunction]
#[pyo3(signature = (kind, rows, start, runs, seed, workers=None))]
fn monte_carlo(
    py: Python<'_>,
    kind: &str,
    rows: Vec<Vec<f64>>,
    start: usize,
    runs: u64,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<(Estimate, Estimate)> {
    let m = TransitionMatrix::from_rows(parse_kind(kind)?, rows).map_err(to_py)?;
    let opts = McOptions { workers, ..McOptions::default() };
    let (h, t) = py
        .detach(|| exit_analysis::mc_exit_oracle(&m, start, runs, seed, &opts))
        .map_err(to_py)?;
    Ok((h.into(), t.into()))
}

#[pyclass(frozen, get_all)]
struct TaskResult {
    histogram: Vec<u64>,
    accidents: u32,
    trips_completed: u32,
    empirical_h0: f64,
    frame_count: u64,
}

#[pymethods]
impl TaskResult {
    fn __repr__(&self) -> String {
        format!(
            "TaskResult(accidents={}, trips_completed={}, frame_count={})",
            self.accidents, self.trips_completed, self.frame_count
        )
    }
}

/// Run one car-following task with default vehicle and controller settings.
#[pyfunction]
#[pyo3(signature = (flow, ttc_threshold, seed, trips=200, space=None, workers=None))]
fn simulate(
    py: Python<'_>,
    flow: f64,
    ttc_threshold: f64,
    seed: u64,
    trips: u32,
    space: Option<&StateSpace>,
    workers: Option<usize>,
) -> PyResult<TaskResult> {
    let mut task = TaskSpec::new(flow, ttc_threshold, seed);
    task.trip_count = trips;
    let cfg = space_or_default(space);
    let opts = RunOptions { record_frames: false, workers };
    let res = py
        .detach(|| sim::run_task(&task, &cfg, &SimSettings::default(), &opts))
        .map_err(to_py)?;
    Ok(TaskResult {
        histogram: res.histogram.counts().to_vec(),
        accidents: res.accidents,
        trips_completed: res.trips_completed,
        empirical_h0: res.empirical_h0,
        frame_count: res.frame_count,
    })
}

#[pymodule]
fn ttarisk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<StateSpace>()?;
    m.add_class::<Solution>()?;
    m.add_class::<Estimate>()?;
    m.add_class::<TaskResult>()?;
    m.add_function(wrap_pyfunction!(compute_tta, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(risk_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(coarsen, m)?)?;
    m.add_function(wrap_pyfunction!(transition_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
