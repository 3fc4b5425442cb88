//! The `ttarisk` command line: `solve`, `simulate` and `entropy`.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and input errors,
//! 3 for computational failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{NamedTask, RunConfig};
use crate::error::{Error, Result};
use crate::exit_analysis::{mc_exit_oracle, replication_seed, ExitSolution, McEstimate, McOptions};
use crate::formats::{read_histogram_csv, to_json_string, write_frames_csv, write_histogram_csv};
use crate::markov_model::{build_extended_matrix, build_ideal_matrix, build_modified_matrix};
use crate::risk_metrics::{risk_entropy, shannon_entropy, StateHistogram, TtaDistribution};
use crate::sim::{run_task, RunOptions};
use crate::state_space::{threshold_to_state, StateSpaceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ttarisk", version, about = "Time-to-accident risk chains and car-following simulation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Worker threads for simulation and Monte Carlo runs.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the transition matrices and solve for h, g and accident frequency.
    Solve {
        /// Cross-check h(0) and g(0) with this many Monte Carlo walks.
        #[arg(long, value_name = "RUNS")]
        mc_check: Option<u64>,
    },
    /// Run simulation tasks and write frame logs, histograms and summaries.
    Simulate {
        /// Task id to run.
        #[arg(long, value_name = "K", required_unless_present = "all", conflicts_with = "all")]
        task: Option<u32>,
        /// Run every configured task.
        #[arg(long)]
        all: bool,
    },
    /// Shannon and risk entropy of a histogram CSV, printed as JSON.
    Entropy {
        /// Histogram CSV with header `state,count`.
        hist: PathBuf,
    },
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_COMPUTE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { mc_check } => {
            let cfg = load_config(&cli.config, cli.seed)?;
            let out = output_dir(&cli.output, &cfg)?;
            cmd_solve(&cfg, &out, mc_check, cli.workers)
        }
        Command::Simulate { task, all } => {
            let cfg = load_config(&cli.config, cli.seed)?;
            let out = output_dir(&cli.output, &cfg)?;
            let tasks: Vec<NamedTask> = if all {
                cfg.tasks.clone()
            } else {
                let id = task.expect("clap requires --task without --all");
                let t = cfg
                    .task(id)
                    .ok_or_else(|| Error::Config(format!("unknown task {id}")))?;
                vec![*t]
            };
            for t in &tasks {
                cmd_simulate(&cfg, t, &out, cli.workers)?;
            }
            Ok(())
        }
        Command::Entropy { hist } => {
            let space = match &cli.config {
                Some(path) => RunConfig::load(path, Some(cli.seed.unwrap_or(0)))?.state_space,
                None => StateSpaceConfig::default(),
            };
            let report = cmd_entropy(&hist, &space)?;
            print!("{}", to_json_string(&report)?);
            Ok(())
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, seed),
        None => match seed {
            Some(s) => RunConfig::with_seed(s),
            None => Err(Error::Config("pass --config or --seed".into())),
        },
    }
}

fn output_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Io(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct SolveParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c: usize,
    pub d_count: usize,
    pub delta: f64,
    pub sigma: f64,
    pub flow_q: f64,
    pub density_k: f64,
    pub p0: f64,
    pub q0: f64,
    pub p3: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct McComparison {
    pub solver: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub runs: u64,
}

impl McComparison {
    fn new(solver: f64, est: &McEstimate) -> Self {
        Self { solver, estimate: est.mean, std_error: est.std_error, runs: est.runs }
    }
}

#[derive(Debug, Serialize)]
pub struct McBlock {
    pub runs: u64,
    pub seed: u64,
    /// Accident probability from state 0 on the extended chain.
    pub h0: McComparison,
    /// Steps to the accident from state 0 on the modified chain.
    pub g0: McComparison,
}

#[derive(Debug, Serialize)]
pub struct SolveOutput {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub accident_frequency_per_hour: f64,
    pub params: SolveParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McBlock>,
}

/// Solve the configured chain and write `solution.json` plus the three matrices.
pub fn cmd_solve(cfg: &RunConfig, out: &Path, mc_check: Option<u64>, workers: Option<usize>) -> Result<()> {
    let (p0, q0) = cfg.traffic.free_state_probs()?;
    let ideal = build_ideal_matrix(&cfg.chain, p0, q0)?;
    let modified = build_modified_matrix(&cfg.chain, p0, q0)?;
    let extended = build_extended_matrix(&cfg.chain, &cfg.traffic, cfg.p3)?;
    let delta = cfg.state_space.delta();
    let sol = ExitSolution::compute(&extended, &modified, delta)?;

    let mc = match mc_check {
        None => None,
        Some(runs) => {
            let opts = McOptions { workers, ..McOptions::default() };
            let (h_hat, _) = mc_exit_oracle(&extended, 0, runs, replication_seed(cfg.seed, 1), &opts)?;
            let (_, g_hat) = mc_exit_oracle(&modified, 0, runs, replication_seed(cfg.seed, 2), &opts)?;
            Some(McBlock {
                runs,
                seed: cfg.seed,
                h0: McComparison::new(sol.h[0], &h_hat),
                g0: McComparison::new(sol.g[0], &g_hat),
            })
        }
    };

    let output = SolveOutput {
        accident_frequency_per_hour: sol.accident_frequency_per_hour()?,
        h: sol.h,
        g: sol.g,
        params: SolveParams {
            alpha: cfg.chain.alpha(),
            beta: cfg.chain.beta(),
            gamma: cfg.chain.gamma(),
            c: cfg.chain.c(),
            d_count: cfg.chain.d_count(),
            delta,
            sigma: cfg.state_space.sigma(),
            flow_q: cfg.traffic.flow_q,
            density_k: cfg.traffic.density_k,
            p0,
            q0,
            p3: cfg.p3,
            seed: cfg.seed,
        },
        mc,
    };
    for (name, m) in [("ideal", &ideal), ("modified", &modified), ("extended", &extended)] {
        write_text(&out.join(format!("matrix_{name}.json")), &(m.to_json() + "\n"))?;
    }
    write_text(&out.join("solution.json"), &to_json_string(&output)?)
}

#[derive(Debug, Serialize)]
pub struct TaskSummary {
    pub task: u32,
    pub flow_q: f64,
    pub ttc_threshold_c: f64,
    pub conflict_state: usize,
    pub seed: u64,
    pub trip_count: u32,
    pub accidents: u32,
    pub trips_completed: u32,
    pub empirical_h0: f64,
    pub frame_count: u64,
    /// Share of frames in states `D - 1` and above.
    pub near_accident_frequency: f64,
    pub risk_entropy_seconds: f64,
    pub shannon_entropy_bits: f64,
}

/// Run one task and write `task<k>_frames.csv`, `task<k>_hist.csv` and `task<k>_summary.json`.
pub fn cmd_simulate(cfg: &RunConfig, task: &NamedTask, out: &Path, workers: Option<usize>) -> Result<TaskSummary> {
    let space = &cfg.state_space;
    let res = run_task(&task.spec, space, &cfg.sim, &RunOptions { record_frames: true, workers })?;
    let summary = TaskSummary {
        task: task.id,
        flow_q: task.spec.flow_q,
        ttc_threshold_c: task.spec.ttc_threshold_c,
        conflict_state: threshold_to_state(task.spec.ttc_threshold_c, space)?,
        seed: task.spec.seed,
        trip_count: task.spec.trip_count,
        accidents: res.accidents,
        trips_completed: res.trips_completed,
        empirical_h0: res.empirical_h0,
        frame_count: res.frame_count,
        near_accident_frequency: res.histogram.tail_frequency(space.d_count() - 1)?,
        risk_entropy_seconds: histogram_risk_entropy(&res.histogram, space)?,
        shannon_entropy_bits: shannon_entropy(&res.histogram)?,
    };

    let k = task.id;
    let mut frames = create_file(&out.join(format!("task{k}_frames.csv")))?;
    write_frames_csv(&res.frames, &mut frames)?;
    let mut hist = create_file(&out.join(format!("task{k}_hist.csv")))?;
    write_histogram_csv(&res.histogram, &mut hist)?;
    write_text(&out.join(format!("task{k}_summary.json")), &to_json_string(&summary)?)?;
    Ok(summary)
}

fn histogram_risk_entropy(hist: &StateHistogram, space: &StateSpaceConfig) -> Result<f64> {
    risk_entropy(&TtaDistribution::from_histogram(hist, space)?)
}

#[derive(Debug, Serialize)]
pub struct EntropyReport {
    pub shannon_entropy_bits: f64,
    pub risk_entropy_seconds: f64,
}

pub fn cmd_entropy(path: &Path, space: &StateSpaceConfig) -> Result<EntropyReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    let hist = read_histogram_csv(&text)?;
    Ok(EntropyReport {
        shannon_entropy_bits: shannon_entropy(&hist)?,
        risk_entropy_seconds: histogram_risk_entropy(&hist, space)?,
    })
}
