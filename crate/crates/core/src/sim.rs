//! Frame-stepped car-following simulation of an automated follower behind a
//! single leader on a road section between two signalized intersections.
//!
//! Every frame the follower measures its TTA to the leader and maps it to a
//! risk state. At each decision point the controller picks APPROACH below the
//! conflict row `c` and EVADE at or above it (emergency braking at state D).
//! With probability `alpha` the opposite action is executed instead, and with
//! probability `beta` execution is postponed so the previous action carries on.
//!
//! The leader cruises at its entry speed and brakes at random moments. Traffic
//! density enters through the entry speeds and the initial headway.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit_analysis::replication_seed;
use crate::markov_model::TrafficEnv;
use crate::risk_metrics::{compute_ttc, KinematicState, StateHistogram, TtaValue};
use crate::state_space::{threshold_to_state, tta_to_state, StateSpaceConfig};

const KMH: f64 = 1.0 / 3.6;

/// Minimum headway between successive vehicles entering the section, seconds.
pub const MIN_HEADWAY_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Approach,
    Evade,
    /// Cruising at the target speed.
    Hold,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Approach => "APPROACH",
            Action::Evade => "EVADE",
            Action::Hold => "HOLD",
        }
    }
}

/// When the error and delay draws happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionTiming {
    /// Once per sigma-epoch (`sigma / delta` frames); the action is held in between.
    PerEpoch,
    /// Every frame.
    PerFrame,
}

/// Follower dynamics and decision-error parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    /// Approach acceleration, m/s^2.
    pub accel: f64,
    /// Evasive deceleration, m/s^2 (negative).
    pub decel: f64,
    /// Emergency deceleration at state D, m/s^2 (negative).
    pub emergency_decel: f64,
    pub vehicle_length: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Car-following time headway that caps the approach speed, seconds.
    pub time_headway: f64,
    /// Standstill gap kept while approaching, meters.
    pub standstill_gap: f64,
    pub timing: DecisionTiming,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            accel: 1.5,
            decel: -3.0,
            emergency_decel: -6.0,
            vehicle_length: 5.0,
            alpha: 0.02,
            beta: 0.34,
            time_headway: 1.0,
            standstill_gap: 2.0,
            timing: DecisionTiming::PerEpoch,
        }
    }
}

/// Random braking of the leader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderModel {
    /// Braking events per second.
    pub brake_rate: f64,
    pub brake_decel_min: f64,
    pub brake_decel_max: f64,
    pub brake_duration_min: f64,
    pub brake_duration_max: f64,
    /// Acceleration back to cruise speed, m/s^2.
    pub recover_accel: f64,
}

impl Default for LeaderModel {
    fn default() -> Self {
        Self {
            brake_rate: 0.04,
            brake_decel_min: 1.0,
            brake_decel_max: 3.0,
            brake_duration_min: 0.5,
            brake_duration_max: 2.5,
            recover_accel: 1.5,
        }
    }
}

/// Everything besides the task that a simulation run needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub controller: ControllerSettings,
    pub leader: LeaderModel,
    /// Road parameters; `flow_q` and `density_k` are replaced per task.
    pub road: TrafficEnv,
    /// Trips still running after this many seconds end as completed.
    pub max_trip_seconds: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            controller: ControllerSettings::default(),
            leader: LeaderModel::default(),
            road: TrafficEnv::with_flow(0.0).expect("default road"),
            max_trip_seconds: 3600.0,
        }
    }
}

/// One experiment task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Vehicles per hour.
    pub flow_q: f64,
    /// TTC threshold at which evasive action starts, seconds.
    pub ttc_threshold_c: f64,
    pub seed: u64,
    pub trip_count: u32,
    pub section_length: f64,
    /// Speed limit, km/h.
    pub u_max: f64,
}

impl TaskSpec {
    pub const DEFAULT_TRIPS: u32 = 200;
    pub const SECTION_LENGTH_M: f64 = 807.0;

    pub fn new(flow_q: f64, ttc_threshold_c: f64, seed: u64) -> Self {
        Self {
            flow_q,
            ttc_threshold_c,
            seed,
            trip_count: Self::DEFAULT_TRIPS,
            section_length: Self::SECTION_LENGTH_M,
            u_max: TrafficEnv::DEFAULT_U_MAX,
        }
    }

    /// The four tasks: low/high flow crossed with high/low TTC threshold.
    pub fn standard_tasks(seed: u64) -> Vec<TaskSpec> {
        [(1500.0, 2.0), (1800.0, 2.0), (1500.0, 1.4), (1800.0, 1.4)]
            .iter()
            .enumerate()
            .map(|(i, &(q, c))| TaskSpec::new(q, c, replication_seed(seed, i as u64 + 1)))
            .collect()
    }

    pub fn validate(&self, cfg: &StateSpaceConfig) -> Result<()> {
        if !(self.flow_q > 0.0) {
            return Err(Error::Config(format!("task flow must be positive, got {}", self.flow_q)));
        }
        if !(self.section_length > 0.0) {
            return Err(Error::Config("section length must be positive".into()));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::Config("speed limit must be positive".into()));
        }
        if self.trip_count == 0 {
            return Err(Error::Config("trip count must be positive".into()));
        }
        threshold_to_state(self.ttc_threshold_c, cfg)
            .map_err(|e| Error::Config(format!("task TTC threshold: {e}")))?;
        Ok(())
    }
}

/// One simulated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    /// Frame number within the trip.
    pub frame_index: u64,
    pub time: f64,
    pub leader: KinematicState,
    pub follower: KinematicState,
    pub tta: TtaValue,
    pub state: usize,
    pub action: Action,
    pub delayed: bool,
    pub errored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    /// Per-frame log, trips in order; empty unless frames were recorded.
    pub frames: Vec<FrameRecord>,
    pub histogram: StateHistogram,
    pub accidents: u32,
    pub trips_completed: u32,
    /// Fraction of trips ending in an accident.
    pub empirical_h0: f64,
    pub frame_count: u64,
}

/// A vehicle entering the section upstream of the follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderArrival {
    /// Entry time, seconds from the start of the stream.
    pub entry_time: f64,
    /// Entry speed, km/h.
    pub entry_speed: f64,
    /// Headway to the next vehicle, seconds.
    pub headway: f64,
}

/// `count` arrivals with shifted-exponential headways of mean `3600 / q` s
/// (minimum [`MIN_HEADWAY_S`]) and entry speeds `u_e(k)` plus normal noise,
/// clamped to `[0, u_max]`.
pub fn generate_leader_stream(q: f64, seed: u64, env: &TrafficEnv, count: usize) -> Result<Vec<LeaderArrival>> {
    let k = env.flow_to_density(q)?;
    let mean_speed = env.equilibrium_speed(k)?;
    let mean_headway = 3600.0 / q;
    if !(mean_headway > MIN_HEADWAY_S) {
        return Err(Error::InfeasibleFlow { flow: q, capacity: 3600.0 / MIN_HEADWAY_S });
    }
    let gap = Exp::new(1.0 / (mean_headway - MIN_HEADWAY_S)).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, env.speed_noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let headway = MIN_HEADWAY_S + gap.sample(&mut rng);
        let entry_speed = (mean_speed + noise.sample(&mut rng)).clamp(0.0, env.u_max);
        out.push(LeaderArrival { entry_time: t, entry_speed, headway });
        t += headway;
    }
    Ok(out)
}

/// Motion command carried from one frame to the next.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Accelerate toward the desired speed under the car-following cap, or
    /// toward the speed limit when `capped` is false.
    Approach { capped: bool },
    Brake { emergency: bool },
}

impl Command {
    fn opposite(self) -> Command {
        match self {
            Command::Approach { .. } => Command::Brake { emergency: false },
            Command::Brake { .. } => Command::Approach { capped: false },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LeaderState {
    car: KinematicState,
    cruise: f64,
    brake_decel: f64,
    brake_frames_left: u32,
}

/// Simulation state of one trip.
#[derive(Debug, Clone)]
pub struct World {
    pub frame: u64,
    pub follower: KinematicState,
    leader: LeaderState,
    /// Follower's desired speed, m/s.
    desired_speed: f64,
    command: Command,
    brake_prob_per_frame: f64,
}

impl World {
    pub fn leader(&self) -> &KinematicState {
        &self.leader.car
    }
}

/// Per-task constants derived once.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub cfg: &'a StateSpaceConfig,
    pub settings: &'a SimSettings,
    pub conflict_row: usize,
    pub u_max: f64,
}

/// Outcome of one call to [`step`].
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub record: FrameRecord,
    pub accident: bool,
}

fn integrate(car: &mut KinematicState, accel: f64, dt: f64, v_max: f64) {
    let v0 = car.speed;
    let v1 = v0 + accel * dt;
    if v1 < 0.0 {
        // stops within the frame
        let t_stop = if accel < 0.0 { v0 / -accel } else { 0.0 };
        car.position += 0.5 * v0 * t_stop;
        car.speed = 0.0;
    } else if v1 > v_max && accel > 0.0 {
        let t_cap = ((v_max - v0) / accel).max(0.0);
        car.position += 0.5 * (v0 + v_max) * t_cap + v_max * (dt - t_cap);
        car.speed = v_max;
    } else {
        car.position += 0.5 * (v0 + v1) * dt;
        car.speed = v1;
    }
}

/// Advance `world` by one frame of `delta` seconds.
pub fn step<R: Rng>(world: &mut World, ctx: &StepContext<'_>, rng: &mut R) -> Result<StepOutput> {
    let cfg = ctx.cfg;
    let ctl = &ctx.settings.controller;
    let lm = &ctx.settings.leader;
    let dt = cfg.delta();
    let d = cfg.d_count();

    let tta = compute_ttc(&world.leader.car, &world.follower)?;
    let state = tta_to_state(tta, cfg)?;

    let decision_point = match ctl.timing {
        DecisionTiming::PerFrame => true,
        DecisionTiming::PerEpoch => world.frame % cfg.frames_per_epoch() as u64 == 0,
    };
    let (mut delayed, mut errored) = (false, false);
    if decision_point {
        let decided = if state >= ctx.conflict_row {
            Command::Brake { emergency: state >= d }
        } else {
            Command::Approach { capped: true }
        };
        let u: f64 = rng.random();
        world.command = if u < ctl.alpha {
            errored = true;
            decided.opposite()
        } else if u < ctl.alpha + ctl.beta {
            delayed = true;
            world.command
        } else {
            decided
        };
    }

    let f = &world.follower;
    let gap = world.leader.car.position - f.position - f.length;
    let (accel, action) = match world.command {
        Command::Brake { emergency } => (if emergency { ctl.emergency_decel } else { ctl.decel }, Action::Evade),
        Command::Approach { capped } => {
            // an uncapped approach is the erroneous plan: speed up toward the limit
            let target = if capped {
                let safe = ((gap - ctl.standstill_gap) / ctl.time_headway).max(0.0);
                world.desired_speed.min(safe)
            } else {
                ctx.u_max
            };
            let needed = (target - f.speed) / dt;
            if needed.abs() < 1e-12 {
                (0.0, Action::Hold)
            } else if needed > 0.0 {
                (needed.min(ctl.accel), Action::Approach)
            } else {
                // settle back under the car-following cap gently
                (needed.max(-ctl.accel), Action::Approach)
            }
        }
    };

    let record = FrameRecord {
        frame_index: world.frame,
        time: world.frame as f64 * dt,
        leader: world.leader.car,
        follower: world.follower,
        tta,
        state,
        action,
        delayed,
        errored,
    };

    // leader: brake events, then recovery toward cruise speed
    let leader = &mut world.leader;
    let leader_accel = if leader.brake_frames_left > 0 {
        leader.brake_frames_left -= 1;
        -leader.brake_decel
    } else if rng.random::<f64>() < world.brake_prob_per_frame {
        leader.brake_decel = rng.random_range(lm.brake_decel_min..=lm.brake_decel_max);
        let secs = rng.random_range(lm.brake_duration_min..=lm.brake_duration_max);
        leader.brake_frames_left = ((secs / dt).round() as u32).saturating_sub(1);
        -leader.brake_decel
    } else if leader.car.speed < leader.cruise {
        ((leader.cruise - leader.car.speed) / dt).min(lm.recover_accel)
    } else {
        0.0
    };
    let leader_cap = leader.cruise.max(leader.car.speed);
    integrate(&mut leader.car, leader_accel, dt, leader_cap);
    integrate(&mut world.follower, accel, dt, ctx.u_max);
    world.frame += 1;

    let gap_after = world.leader.car.position - world.follower.position - world.follower.length;
    Ok(StepOutput { record, accident: gap_after <= 0.0 })
}

struct TripOutcome {
    frames: Vec<FrameRecord>,
    histogram: StateHistogram,
    accident: bool,
}

fn run_trip(
    arrival: &LeaderArrival,
    trip_seed: u64,
    task: &TaskSpec,
    env: &TrafficEnv,
    ctx: &StepContext<'_>,
    record: bool,
) -> Result<TripOutcome> {
    let ctl = &ctx.settings.controller;
    let cfg = ctx.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(trip_seed);
    let u_max = task.u_max * KMH;
    let noise = Normal::new(0.0, env.speed_noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let u_e = env.equilibrium_speed(env.density_k)?;
    let desired_speed = ((u_e + noise.sample(&mut rng)) * KMH).clamp(1.0, u_max);

    let leader_speed = arrival.entry_speed * KMH;
    let leader_pos = ctl.vehicle_length + ctl.standstill_gap + leader_speed * arrival.headway;
    let brake_rate = ctx.settings.leader.brake_rate;
    let mut world = World {
        frame: 0,
        follower: KinematicState { position: 0.0, speed: 0.0, length: ctl.vehicle_length },
        leader: LeaderState {
            car: KinematicState { position: leader_pos, speed: leader_speed, length: ctl.vehicle_length },
            cruise: leader_speed,
            brake_decel: 0.0,
            brake_frames_left: 0,
        },
        desired_speed,
        command: Command::Approach { capped: true },
        brake_prob_per_frame: brake_rate * cfg.delta(),
    };

    let max_frames = (ctx.settings.max_trip_seconds / cfg.delta()).ceil() as u64;
    let mut histogram = StateHistogram::zeros(cfg.state_count());
    let mut frames = Vec::new();
    loop {
        let out = step(&mut world, ctx, &mut rng)?;
        histogram.record(out.record.state);
        if record {
            frames.push(out.record);
        }
        if out.accident {
            let crash = FrameRecord {
                frame_index: world.frame,
                time: world.frame as f64 * cfg.delta(),
                leader: world.leader.car,
                follower: world.follower,
                tta: TtaValue::Finite(0.0),
                state: cfg.accident_state(),
                action: out.record.action,
                delayed: false,
                errored: false,
            };
            histogram.record(crash.state);
            if record {
                frames.push(crash);
            }
            return Ok(TripOutcome { frames, histogram, accident: true });
        }
        if world.follower.position >= task.section_length || world.frame >= max_frames {
            if world.frame >= max_frames {
                log::warn!("trip stopped after {max_frames} frames without reaching the section end");
            }
            return Ok(TripOutcome { frames, histogram, accident: false });
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub record_frames: bool,
    /// Worker threads for independent trips; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_frames: true, workers: None }
    }
}

/// Simulate `task.trip_count` trips. Trip `j` follows arrival `j` of the
/// leader stream and draws from its own generator, so results depend only on
/// the inputs.
pub fn run_task(task: &TaskSpec, cfg: &StateSpaceConfig, settings: &SimSettings, opts: &RunOptions) -> Result<SimulationResult> {
    task.validate(cfg)?;
    let ctl = &settings.controller;
    if !(0.0..=1.0).contains(&ctl.alpha) || !(0.0..=1.0).contains(&ctl.beta) || ctl.alpha + ctl.beta > 1.0 {
        return Err(Error::Config("controller alpha/beta must be probabilities with alpha + beta <= 1".into()));
    }
    let road = &settings.road;
    let env = TrafficEnv::from_flow(task.flow_q, task.u_max, road.u_free, road.k_jam, road.speed_noise_sd)?;
    let ctx = StepContext {
        cfg,
        settings,
        conflict_row: threshold_to_state(task.ttc_threshold_c, cfg)?,
        u_max: task.u_max * KMH,
    };
    let stream = generate_leader_stream(task.flow_q, task.seed, &env, task.trip_count as usize)?;

    let run = || {
        stream
            .par_iter()
            .enumerate()
            .map(|(j, arrival)| {
                run_trip(arrival, replication_seed(task.seed ^ 0x5EED, j as u64), task, &env, &ctx, opts.record_frames)
            })
            .collect::<Result<Vec<_>>>()
    };
    let trips = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let mut histogram = StateHistogram::zeros(cfg.state_count());
    let mut frames = Vec::new();
    let mut accidents = 0u32;
    for trip in trips {
        histogram.merge(&trip.histogram);
        accidents += trip.accident as u32;
        frames.extend(trip.frames);
    }
    Ok(SimulationResult {
        frames,
        frame_count: histogram.total(),
        histogram,
        accidents,
        trips_completed: task.trip_count - accidents,
        empirical_h0: accidents as f64 / task.trip_count as f64,
    })
}

/// Transition counts between successive sigma-epochs of simulated trips.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalChain {
    pub counts: Vec<Vec<u64>>,
}

impl EmpiricalChain {
    /// Row-normalized estimate for `state`; `None` if the state was never left.
    pub fn row(&self, state: usize) -> Option<Vec<f64>> {
        let row = self.counts.get(state)?;
        let total: u64 = row.iter().sum();
        (total > 0).then(|| row.iter().map(|&n| n as f64 / total as f64).collect())
    }

    pub fn dimension(&self) -> usize {
        self.counts.len()
    }
}

/// Maximum-likelihood transition estimate from a frame log.
///
/// Frames are subsampled every `sigma / delta` frames (plus the accident frame
/// that ends a trip); transitions never cross trip boundaries, which are
/// detected by `frame_index` restarting.
pub fn empirical_chain(frames: &[FrameRecord], cfg: &StateSpaceConfig) -> Result<EmpiricalChain> {
    if frames.len() < 2 {
        return Err(Error::EmptyTrace);
    }
    let n = cfg.state_count();
    let epoch = cfg.frames_per_epoch() as u64;
    let mut counts = vec![vec![0u64; n]; n];
    let mut prev: Option<(u64, usize)> = None;
    for f in frames {
        if let Some((idx, _)) = prev {
            if f.frame_index <= idx {
                prev = None;
            }
        }
        let sampled = f.frame_index % epoch == 0 || f.state == cfg.accident_state();
        if !sampled {
            continue;
        }
        if let Some((_, s)) = prev {
            counts[s.min(n - 1)][f.state.min(n - 1)] += 1;
        }
        prev = Some((f.frame_index, f.state));
    }
    Ok(EmpiricalChain { counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task(q: f64, c: f64, trips: u32) -> TaskSpec {
        TaskSpec { trip_count: trips, ..TaskSpec::new(q, c, 11) }
    }

    #[test]
    fn headway_means() {
        let env = TrafficEnv::with_flow(1800.0).unwrap();
        for (q, mean) in [(1800.0, 2.0), (1500.0, 2.4)] {
            let s = generate_leader_stream(q, 5, &env, 200_000).unwrap();
            let avg = s.iter().map(|a| a.headway).sum::<f64>() / s.len() as f64;
            assert!((avg - mean).abs() < 0.02, "q={q}: {avg}");
            assert!(s.iter().all(|a| a.headway >= MIN_HEADWAY_S));
            assert!(s.iter().all(|a| (0.0..=60.0).contains(&a.entry_speed)));
        }
    }

    #[test]
    fn stream_is_seeded() {
        let env = TrafficEnv::with_flow(1500.0).unwrap();
        let a = generate_leader_stream(1500.0, 3, &env, 50).unwrap();
        assert_eq!(a, generate_leader_stream(1500.0, 3, &env, 50).unwrap());
        assert_ne!(a, generate_leader_stream(1500.0, 4, &env, 50).unwrap());
        assert_eq!(
            generate_leader_stream(2000.0, 3, &env, 5).unwrap_err().kind(),
            "InfeasibleFlowError"
        );
    }

    fn world(leader_pos: f64, leader_v: f64, follower_v: f64, desired: f64) -> World {
        World {
            frame: 0,
            follower: KinematicState { position: 0.0, speed: follower_v, length: 5.0 },
            leader: LeaderState {
                car: KinematicState { position: leader_pos, speed: leader_v, length: 5.0 },
                cruise: leader_v,
                brake_decel: 0.0,
                brake_frames_left: 0,
            },
            desired_speed: desired,
            command: Command::Approach { capped: true },
            brake_prob_per_frame: 0.0,
        }
    }

    fn ctx_with<'a>(cfg: &'a StateSpaceConfig, settings: &'a SimSettings, c: usize) -> StepContext<'a> {
        StepContext { cfg, settings, conflict_row: c, u_max: 60.0 * KMH }
    }

    #[test]
    fn free_driving_accelerates() {
        let cfg = StateSpaceConfig::default();
        let settings = SimSettings::default();
        let ctx = ctx_with(&cfg, &settings, 4);
        let mut w = world(500.0, 5.0, 10.0, 15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // draw until a frame with neither error nor delay
        let out = loop {
            let mut probe = w.clone();
            let out = step(&mut probe, &ctx, &mut rng).unwrap();
            if !out.record.errored && !out.record.delayed {
                w = probe;
                break out;
            }
        };
        assert_eq!(out.record.state, 0);
        assert_eq!(out.record.action, Action::Approach);
        assert!((w.follower.speed - (10.0 + 1.5 / 15.0)).abs() < 1e-12);
    }

    #[test]
    fn conflict_evades_without_errors() {
        let cfg = StateSpaceConfig::default();
        let mut settings = SimSettings::default();
        settings.controller.alpha = 0.0;
        settings.controller.beta = 0.0;
        let ctx = ctx_with(&cfg, &settings, 4);
        // gap 15 m, closing 10 m/s: TTA -1.5 s, state 4
        let mut w = world(20.0, 5.0, 15.0, 15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = step(&mut w, &ctx, &mut rng).unwrap();
        assert_eq!(out.record.state, 4);
        assert_eq!(out.record.action, Action::Evade);
        assert!((w.follower.speed - (15.0 - 3.0 / 15.0)).abs() < 1e-12);
        // state D brakes at the emergency rate: gap 4 m closing 10 m/s -> -0.4 s is state 9
        // gap 7 m -> -0.7 s, state 8
        let mut w = world(12.0, 5.0, 15.0, 15.0);
        let out = step(&mut w, &ctx, &mut rng).unwrap();
        assert_eq!(out.record.state, 8);
        assert!((w.follower.speed - (15.0 - 6.0 / 15.0)).abs() < 1e-12);
    }

    #[test]
    fn certain_error_inverts() {
        let cfg = StateSpaceConfig::default();
        let mut settings = SimSettings::default();
        settings.controller.alpha = 1.0;
        settings.controller.beta = 0.0;
        settings.controller.timing = DecisionTiming::PerFrame;
        let ctx = ctx_with(&cfg, &settings, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = world(500.0, 5.0, 10.0, 15.0);
        for _ in 0..5 {
            let out = step(&mut w, &ctx, &mut rng).unwrap();
            assert!(out.record.errored);
            assert_eq!(out.record.action, Action::Evade);
        }
        let mut w = world(20.0, 5.0, 15.0, 15.0);
        let out = step(&mut w, &ctx, &mut rng).unwrap();
        assert_eq!(out.record.action, Action::Approach);
        assert!(w.follower.speed > 15.0);
    }

    #[test]
    fn task_is_reproducible() {
        let cfg = StateSpaceConfig::default();
        let settings = SimSettings::default();
        let task = small_task(1800.0, 1.4, 20);
        let a = run_task(&task, &cfg, &settings, &RunOptions::default()).unwrap();
        let b = run_task(&task, &cfg, &settings, &RunOptions { workers: Some(3), ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.accidents + a.trips_completed, 20);
        assert_eq!(a.histogram.total(), a.frames.len() as u64);
        assert_eq!(a.frame_count, a.frames.len() as u64);
    }

    #[test]
    fn frames_are_consistent() {
        let cfg = StateSpaceConfig::default();
        let settings = SimSettings::default();
        let task = small_task(1500.0, 2.0, 10);
        let r = run_task(&task, &cfg, &settings, &RunOptions::default()).unwrap();
        let v_cap = 60.0 * KMH + 1e-9;
        let mut last_pos = f64::NEG_INFINITY;
        for f in &r.frames {
            assert!((f.time - f.frame_index as f64 * cfg.delta()).abs() < 1e-9);
            assert_eq!(f.state, tta_to_state(f.tta, &cfg).unwrap());
            assert!(f.follower.speed >= 0.0 && f.follower.speed <= v_cap);
            assert!(f.leader.speed >= 0.0 && f.leader.speed <= v_cap);
            if f.frame_index == 0 {
                last_pos = f64::NEG_INFINITY;
            }
            assert!(f.follower.position >= last_pos);
            last_pos = f.follower.position;
        }
        // frames per trip match the trip duration
        let trips: Vec<&FrameRecord> = r.frames.iter().filter(|f| f.frame_index == 0).collect();
        assert_eq!(trips.len(), 10);
    }

    #[test]
    fn invalid_task() {
        let cfg = StateSpaceConfig::default();
        let settings = SimSettings::default();
        let mut t = small_task(1500.0, 0.5, 1);
        assert_eq!(run_task(&t, &cfg, &settings, &RunOptions::default()).unwrap_err().kind(), "ConfigError");
        t.ttc_threshold_c = 2.0;
        t.trip_count = 0;
        assert!(run_task(&t, &cfg, &settings, &RunOptions::default()).is_err());
    }

    fn frame(idx: u64, state: usize) -> FrameRecord {
        let car = KinematicState { position: 0.0, speed: 0.0, length: 5.0 };
        FrameRecord {
            frame_index: idx,
            time: 0.0,
            leader: car,
            follower: car,
            tta: TtaValue::NoConflict,
            state,
            action: Action::Hold,
            delayed: false,
            errored: false,
        }
    }

    #[test]
    fn empirical_alternating() {
        let cfg = StateSpaceConfig::default();
        let e = cfg.frames_per_epoch() as u64;
        let frames: Vec<_> = [0, 1, 0, 1].iter().enumerate().map(|(i, &s)| frame(i as u64 * e, s)).collect();
        let chain = empirical_chain(&frames, &cfg).unwrap();
        assert_eq!(chain.row(0).unwrap()[1], 1.0);
        assert_eq!(chain.row(1).unwrap()[0], 1.0);
        assert!(chain.row(2).is_none());
        assert_eq!(empirical_chain(&frames[..1], &cfg).unwrap_err(), Error::EmptyTrace);
    }

    #[test]
    fn empirical_skips_trip_boundaries() {
        let cfg = StateSpaceConfig::default();
        let e = cfg.frames_per_epoch() as u64;
        let frames = vec![frame(0, 0), frame(e, 3), frame(0, 5), frame(e, 5)];
        let chain = empirical_chain(&frames, &cfg).unwrap();
        assert_eq!(chain.counts[3].iter().sum::<u64>(), 0);
        assert_eq!(chain.counts[0][3], 1);
        assert_eq!(chain.counts[5][5], 1);
    }
}
