//! Per-run state persisted between command invocations.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ds_core::clock::Timestamp;
use ds_core::fleet::{MarketModel, PricePath};
use ds_core::sim::SimOptions;
use ds_core::worker::SimulatedExecutor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Local,
}

/// Knobs for the simulated market and executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub seed: u64,
    pub spot_price: f64,
    pub price_volatility: f64,
    pub price_step_s: u64,
    pub interruption_rate_per_hour: Option<f64>,
    pub startup_delay_s: u64,
    pub fleet_tick_s: u64,
    pub task_duration_s: u64,
    pub task_jitter_s: u64,
    pub failure_probability: f64,
    pub deny: Vec<String>,
}

impl SimParams {
    pub fn market(&self) -> MarketModel {
        let path = if self.price_volatility > 0.0 {
            PricePath::RandomWalk {
                volatility: self.price_volatility,
                reversion: 0.1,
            }
        } else {
            PricePath::Constant
        };
        MarketModel::new(
            self.seed,
            self.spot_price,
            self.price_step_s,
            path,
            self.interruption_rate_per_hour,
        )
    }

    pub fn options(&self, export_dir: Option<PathBuf>, delete_logs: bool) -> SimOptions {
        SimOptions {
            startup_delay_s: self.startup_delay_s,
            fleet_tick_s: self.fleet_tick_s,
            executor: SimulatedExecutor {
                seed: self.seed,
                base_duration_s: self.task_duration_s,
                jitter_s: self.task_jitter_s,
                failure_probability: self.failure_probability,
                deny_list: self.deny.iter().cloned().collect(),
            },
            export_dir,
            delete_logs,
            ..SimOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phases {
    pub setup_done: bool,
    pub jobs_submitted: bool,
    pub cluster_started: bool,
    pub torn_down: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub app_name: String,
    pub backend: BackendKind,
    pub config_path: PathBuf,
    pub fleet_path: PathBuf,
    pub job_path: Option<PathBuf>,
    pub sim: SimParams,
    pub declared_outputs: Vec<String>,
    pub phases: Phases,
    /// Virtual time reached by the sim backend.
    pub sim_now: Timestamp,
}

pub fn run_dir(state_dir: &Path, app: &str) -> PathBuf {
    state_dir.join(app)
}

fn run_path(state_dir: &Path, app: &str) -> PathBuf {
    run_dir(state_dir, app).join("run.json")
}

impl RunState {
    pub fn exists(state_dir: &Path, app: &str) -> bool {
        run_path(state_dir, app).exists()
    }

    pub fn load(state_dir: &Path, app: &str) -> io::Result<Option<RunState>> {
        match fs::read(run_path(state_dir, app)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, state_dir: &Path) -> io::Result<()> {
        let dir = run_dir(state_dir, &self.app_name);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("run.json.tmp");
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&tmp, text)?;
        fs::rename(tmp, run_path(state_dir, &self.app_name))?;
        fs::write(state_dir.join("current"), format!("{}\n", self.app_name))
    }
}

/// The app named by `--app`, else the last one set up in this state dir.
pub fn current_app(state_dir: &Path, explicit: Option<&str>) -> io::Result<Option<String>> {
    if let Some(app) = explicit {
        return Ok(Some(app.to_string()));
    }
    match fs::read_to_string(state_dir.join("current")) {
        Ok(text) => Ok(Some(text.trim().to_string()).filter(|s| !s.is_empty())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}
