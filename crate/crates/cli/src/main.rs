//! `ds`: set up a run, submit its jobs, start its cluster, and monitor it to
//! teardown, on either the simulated or the local backend.

mod commands;
mod state;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Exit;
use crate::state::BackendKind;

#[derive(Debug, Parser)]
#[command(name = "ds", version, about = "Queue-driven batch runs on a fleet of preemptible machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct StateArgs {
    /// Where run state is kept.
    #[arg(long, env = "DS_STATE_DIR", default_value = ".ds-state", global = true)]
    pub state_dir: PathBuf,
    /// Run to operate on; defaults to the last one set up.
    #[arg(long, global = true)]
    pub app: Option<String>,
}

/// Market and simulated-executor settings.
#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spot price per machine-hour; defaults to half the configured bid.
    #[arg(long)]
    pub spot_price: Option<f64>,
    /// Relative size of each random-walk price step; 0 keeps the price fixed.
    #[arg(long, default_value_t = 0.0)]
    pub price_volatility: f64,
    #[arg(long, default_value_t = 60)]
    pub price_step_s: u64,
    /// Per-instance reclaim rate, per hour.
    #[arg(long)]
    pub interruption_rate: Option<f64>,
    #[arg(long, default_value_t = ds_core::fleet::DEFAULT_STARTUP_DELAY_S)]
    pub startup_delay: u64,
    #[arg(long, default_value_t = ds_core::sim::DEFAULT_FLEET_TICK_S)]
    pub fleet_tick: u64,
    #[arg(long, default_value_t = 60)]
    pub task_duration: u64,
    #[arg(long, default_value_t = 60)]
    pub task_jitter: u64,
    #[arg(long, default_value_t = 0.0)]
    pub failure_probability: f64,
    /// Task id that always fails (repeatable).
    #[arg(long = "deny")]
    pub deny: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create the queue and register the agent definition.
    #[command(alias = "Setup")]
    Setup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Sim)]
        backend: BackendKind,
        /// Replace an existing run with the same app name.
        #[arg(long)]
        force: bool,
        /// Output file pattern a local command must leave behind (repeatable).
        #[arg(long = "declared-output")]
        declared_outputs: Vec<String>,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Expand the job file and enqueue one message per task.
    #[command(name = "submit-jobs", alias = "submitJobs")]
    SubmitJobs {
        #[arg(long)]
        jobs: PathBuf,
        /// Allow submitting again to a run that already has jobs.
        #[arg(long)]
        requeue: bool,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Request the fleet; agents start as machines come up.
    #[command(name = "start-cluster", alias = "startCluster")]
    StartCluster {
        #[command(flatten)]
        state: StateArgs,
    },
    /// Downscale as the queue drains, then tear everything down.
    #[command(alias = "Monitor")]
    Monitor {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        delete_logs: bool,
        /// Telemetry export directory; defaults to `export` in the run's state.
        #[arg(long)]
        export_dir: Option<PathBuf>,
        #[command(flatten)]
        state: StateArgs,
    },
    /// Run setup through monitor in one process on the simulated backend.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long)]
        jobs: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Defaults to `<report>.export` when a report path is given.
        #[arg(long)]
        export_dir: Option<PathBuf>,
        /// Keep task outputs on disk here instead of in memory.
        #[arg(long)]
        store_root: Option<PathBuf>,
        #[arg(long)]
        delete_logs: bool,
        #[command(flatten)]
        sim: SimArgs,
    },
    #[command(name = "__cluster-daemon", hide = true)]
    ClusterDaemon {
        #[command(flatten)]
        state: StateArgs,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Setup {
            config,
            fleet,
            backend,
            force,
            declared_outputs,
            sim,
            state,
        } => commands::setup(&config, &fleet, backend, force, declared_outputs, &sim, &state),
        Command::SubmitJobs { jobs, requeue, state } => commands::submit_jobs(&jobs, requeue, &state),
        Command::StartCluster { state } => commands::start_cluster(&state),
        Command::Monitor {
            report,
            delete_logs,
            export_dir,
            state,
        } => commands::monitor(report.as_deref(), delete_logs, export_dir, &state),
        Command::Simulate {
            config,
            fleet,
            jobs,
            report,
            export_dir,
            store_root,
            delete_logs,
            sim,
        } => commands::simulate(
            &config,
            &fleet,
            &jobs,
            report.as_deref(),
            export_dir,
            store_root,
            delete_logs,
            &sim,
        ),
        Command::ClusterDaemon { state } => commands::cluster_daemon(&state),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Exit { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
