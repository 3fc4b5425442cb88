//! Run configuration loaded from TOML.
//!
//! Keys are flat with dotted section prefixes, e.g.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! state_space.thrd_detect = 2.2
//! chain.alpha = 0.02
//! tasks.1.flow = 1500
//! tasks.1.ttc_threshold = 2.0
//! ```
//!
//! Every key is optional except `seed` (which `--seed` may supply instead).
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::exit_analysis::replication_seed;
use crate::markov_model::{trip_end_probability, ChainParams, TrafficEnv};
use crate::sim::{ControllerSettings, DecisionTiming, LeaderModel, SimSettings, TaskSpec};
use crate::state_space::{threshold_to_state, StateSpaceConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub state_space: RawStateSpace,
    #[serde(default)]
    pub chain: RawChain,
    #[serde(default)]
    pub traffic: RawTraffic,
    #[serde(default)]
    pub controller: RawController,
    #[serde(default)]
    pub leader: RawLeader,
    #[serde(default)]
    pub sim: RawSim,
    #[serde(default)]
    pub tasks: BTreeMap<String, RawTask>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStateSpace {
    pub thrd_detect: Option<f64>,
    pub thrd_conflict: Option<f64>,
    pub thrd_deadline: Option<f64>,
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawChain {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// TTC threshold in seconds; mapped to the conflict row.
    pub ttc_threshold: Option<f64>,
    /// Explicit conflict row, overriding `ttc_threshold`.
    pub conflict_state: Option<usize>,
    /// Explicit trip-end probability per step, overriding the trip model.
    pub p3: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTraffic {
    pub flow: Option<f64>,
    pub u_max: Option<f64>,
    pub u_free: Option<f64>,
    pub k_jam: Option<f64>,
    pub speed_noise_sd: Option<f64>,
    pub section_length: Option<f64>,
    /// Mean trip speed in km/h; defaults to the equilibrium speed.
    pub trip_speed: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawController {
    pub accel: Option<f64>,
    pub decel: Option<f64>,
    pub emergency_decel: Option<f64>,
    pub vehicle_length: Option<f64>,
    pub time_headway: Option<f64>,
    pub standstill_gap: Option<f64>,
    /// `"epoch"` or `"frame"`.
    pub timing: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLeader {
    pub brake_rate: Option<f64>,
    pub brake_decel_min: Option<f64>,
    pub brake_decel_max: Option<f64>,
    pub brake_duration_min: Option<f64>,
    pub brake_duration_max: Option<f64>,
    pub recover_accel: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSim {
    pub trip_count: Option<u32>,
    pub max_trip_seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTask {
    pub flow: Option<f64>,
    pub ttc_threshold: Option<f64>,
    pub trip_count: Option<u32>,
    pub seed: Option<u64>,
}

/// A numbered simulation task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedTask {
    pub id: u32,
    pub spec: TaskSpec,
}

/// Validated configuration for every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub state_space: StateSpaceConfig,
    pub chain: ChainParams,
    pub traffic: TrafficEnv,
    /// Trip-end probability per chain step.
    pub p3: f64,
    pub section_length: f64,
    pub sim: SimSettings,
    pub tasks: Vec<NamedTask>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn parse_timing(s: &str) -> Result<DecisionTiming> {
    match s {
        "epoch" => Ok(DecisionTiming::PerEpoch),
        "frame" => Ok(DecisionTiming::PerFrame),
        other => Err(Error::Config(format!("controller.timing must be \"epoch\" or \"frame\", got {other:?}"))),
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply defaults and validate. `seed` overrides the file's seed.
    pub fn resolve(self, seed: Option<u64>) -> Result<RunConfig> {
        let seed = seed
            .or(self.seed)
            .ok_or_else(|| Error::Config("no seed given: set `seed` in the config or pass --seed".into()))?;

        let defaults = StateSpaceConfig::default();
        let ss = &self.state_space;
        let state_space = StateSpaceConfig::new(
            ss.thrd_detect.unwrap_or(defaults.thrd_detect()),
            ss.thrd_conflict.unwrap_or(defaults.thrd_conflict()),
            ss.thrd_deadline.unwrap_or(defaults.thrd_deadline()),
            ss.sigma.unwrap_or(defaults.sigma()),
            ss.delta.unwrap_or(defaults.delta()),
        )?;

        let tr = &self.traffic;
        let traffic = TrafficEnv::from_flow(
            tr.flow.unwrap_or(1500.0),
            tr.u_max.unwrap_or(TrafficEnv::DEFAULT_U_MAX),
            tr.u_free.unwrap_or(TrafficEnv::DEFAULT_U_FREE),
            tr.k_jam.unwrap_or(TrafficEnv::DEFAULT_K_JAM),
            tr.speed_noise_sd.unwrap_or(TrafficEnv::DEFAULT_NOISE_SD),
        )
        .map_err(|e| Error::Config(format!("traffic: {e}")))?;
        let section_length = tr.section_length.unwrap_or(TaskSpec::SECTION_LENGTH_M);

        let ch = &self.chain;
        let c = match ch.conflict_state {
            Some(c) => c,
            None => threshold_to_state(ch.ttc_threshold.unwrap_or(state_space.thrd_conflict()), &state_space)
                .map_err(|e| Error::Config(format!("chain.ttc_threshold: {e}")))?,
        };
        let chain = ChainParams::new(
            ch.alpha.unwrap_or(0.02),
            ch.beta.unwrap_or(0.34),
            c,
            state_space.d_count(),
        )?;

        let p3 = match ch.p3 {
            Some(p) if (0.0..1.0).contains(&p) => p,
            Some(p) => return Err(Error::Config(format!("chain.p3 must lie in [0, 1), got {p}"))),
            None => {
                let speed = match tr.trip_speed {
                    Some(v) => v,
                    None => traffic.equilibrium_speed(traffic.density_k).expect("density within [0, k_jam]"),
                };
                trip_end_probability(section_length, speed, state_space.delta())
                    .map_err(|e| Error::Config(format!("trip model: {e}")))?
            }
        };

        let dc = ControllerSettings::default();
        let co = &self.controller;
        let controller = ControllerSettings {
            accel: co.accel.unwrap_or(dc.accel),
            decel: co.decel.unwrap_or(dc.decel),
            emergency_decel: co.emergency_decel.unwrap_or(dc.emergency_decel),
            vehicle_length: co.vehicle_length.unwrap_or(dc.vehicle_length),
            alpha: chain.alpha(),
            beta: chain.beta(),
            time_headway: co.time_headway.unwrap_or(dc.time_headway),
            standstill_gap: co.standstill_gap.unwrap_or(dc.standstill_gap),
            timing: co.timing.as_deref().map(parse_timing).transpose()?.unwrap_or(dc.timing),
        };
        if !(controller.accel > 0.0 && controller.decel < 0.0 && controller.emergency_decel < 0.0) {
            return Err(Error::Config("controller.accel must be positive, decelerations negative".into()));
        }
        if !(controller.vehicle_length > 0.0 && controller.time_headway >= 0.0 && controller.standstill_gap >= 0.0) {
            return Err(Error::Config("controller lengths and headway must be non-negative".into()));
        }

        let dl = LeaderModel::default();
        let le = &self.leader;
        let leader = LeaderModel {
            brake_rate: le.brake_rate.unwrap_or(dl.brake_rate),
            brake_decel_min: le.brake_decel_min.unwrap_or(dl.brake_decel_min),
            brake_decel_max: le.brake_decel_max.unwrap_or(dl.brake_decel_max),
            brake_duration_min: le.brake_duration_min.unwrap_or(dl.brake_duration_min),
            brake_duration_max: le.brake_duration_max.unwrap_or(dl.brake_duration_max),
            recover_accel: le.recover_accel.unwrap_or(dl.recover_accel),
        };
        if !(leader.brake_rate >= 0.0
            && 0.0 < leader.brake_decel_min
            && leader.brake_decel_min <= leader.brake_decel_max
            && 0.0 < leader.brake_duration_min
            && leader.brake_duration_min <= leader.brake_duration_max
            && leader.recover_accel > 0.0)
        {
            return Err(Error::Config("leader braking parameters out of range".into()));
        }

        let max_trip_seconds = self.sim.max_trip_seconds.unwrap_or(SimSettings::default().max_trip_seconds);
        if !(max_trip_seconds > 0.0) {
            return Err(Error::Config("sim.max_trip_seconds must be positive".into()));
        }
        let sim = SimSettings { controller, leader, road: traffic, max_trip_seconds };

        let trip_count = self.sim.trip_count.unwrap_or(TaskSpec::DEFAULT_TRIPS);
        let mut tasks: Vec<NamedTask> = if self.tasks.is_empty() {
            TaskSpec::standard_tasks(seed)
                .into_iter()
                .zip(1..)
                .map(|(spec, id)| NamedTask { id, spec })
                .collect()
        } else {
            self.tasks
                .iter()
                .map(|(key, raw)| {
                    let id: u32 = key
                        .parse()
                        .map_err(|_| Error::Config(format!("task ids must be positive integers, got `{key}`")))?;
                    if id == 0 {
                        return Err(Error::Config("task ids start at 1".into()));
                    }
                    let flow = raw.flow.ok_or_else(|| Error::Config(format!("tasks.{key}.flow is required")))?;
                    let c = raw
                        .ttc_threshold
                        .ok_or_else(|| Error::Config(format!("tasks.{key}.ttc_threshold is required")))?;
                    let task_seed = raw.seed.unwrap_or_else(|| replication_seed(seed, id as u64));
                    let mut spec = TaskSpec::new(flow, c, task_seed);
                    if let Some(n) = raw.trip_count {
                        spec.trip_count = n;
                    }
                    Ok(NamedTask { id, spec })
                })
                .collect::<Result<_>>()?
        };
        tasks.sort_by_key(|t| t.id);
        for t in &mut tasks {
            let explicit = self.tasks.get(&t.id.to_string()).and_then(|r| r.trip_count);
            if explicit.is_none() {
                t.spec.trip_count = trip_count;
            }
            t.spec.section_length = section_length;
            t.spec.u_max = traffic.u_max;
            t.spec
                .validate(&state_space)
                .map_err(|e| Error::Config(format!("task {}: {e}", t.id)))?;
            TrafficEnv::from_flow(t.spec.flow_q, traffic.u_max, traffic.u_free, traffic.k_jam, traffic.speed_noise_sd)
                .map_err(|e| Error::Config(format!("task {}: {e}", t.id)))?;
        }

        Ok(RunConfig {
            state_space,
            chain,
            traffic,
            p3,
            section_length,
            sim,
            tasks,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("output")),
            seed,
        })
    }
}

impl RunConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Result<Self> {
        RawConfig::default().resolve(Some(seed))
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RawConfig::parse(&text)?.resolve(seed)
    }

    pub fn task(&self, id: u32) -> Option<&NamedTask> {
        self.tasks.iter().find(|t| t.id == id)
    }
}
