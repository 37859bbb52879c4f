//! The lifecycle commands and the one-shot simulation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ds_core::clock::{Clock, Timestamp, WallClock};
use ds_core::fleet::{FleetError, MarketModel};
use ds_core::local::LocalBackend;
use ds_core::monitor::FinalReport;
use ds_core::objectstore::{FsStore, MemoryStore, ObjectStore};
use ds_core::placement::PlacementError;
use ds_core::queue::QueueError;
use ds_core::sim::Simulation;
use ds_core::specfiles::{
    expand_jobs, parse_fleet_spec, parse_job_spec, parse_run_config, validate_run, Diagnostic, FleetSpec,
    RunConfig, Severity, TaskMessage,
};
use ds_core::worker::LocalCommandExecutor;
use ds_core::world::World;
use ds_core::Error;

use crate::state::{current_app, run_dir, BackendKind, Phases, RunState, SimParams};
use crate::{SimArgs, StateArgs};

pub const EXIT_FAILURES: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_PHASE: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

const DAEMON_TICK: Duration = Duration::from_secs(1);
const DAEMON_READY_TIMEOUT: Duration = Duration::from_secs(10);
const DAEMON_EXIT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    fn bad_input(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_BAD_INPUT,
            message: message.into(),
        }
    }

    fn phase(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_PHASE,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Exit {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl From<Error> for Exit {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Spec(_) => EXIT_BAD_INPUT,
            Error::Fleet(FleetError::FleetAlreadyActive(_))
            | Error::Queue(QueueError::QueueAlreadyExists(_))
            | Error::Placement(PlacementError::AlreadyRegistered(_))
            | Error::NotSetUp(_)
            | Error::MonitorLocked(_) => EXIT_PHASE,
            _ => EXIT_INTERNAL,
        };
        Exit {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Exit {
    fn from(err: std::io::Error) -> Self {
        Exit::internal(err.to_string())
    }
}

type Outcome = Result<u8, Exit>;

fn read_input(path: &Path) -> Result<Vec<u8>, Exit> {
    fs::read(path).map_err(|e| Exit::bad_input(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, Exit> {
    parse_run_config(&read_input(path)?).map_err(|e| Exit::bad_input(format!("{}: {e}", path.display())))
}

fn load_fleet(path: &Path) -> Result<FleetSpec, Exit> {
    parse_fleet_spec(&read_input(path)?).map_err(|e| Exit::bad_input(format!("{}: {e}", path.display())))
}

fn load_tasks(path: &Path, config: &RunConfig) -> Result<Vec<TaskMessage>, Exit> {
    let job = parse_job_spec(&read_input(path)?).map_err(|e| Exit::bad_input(format!("{}: {e}", path.display())))?;
    expand_jobs(&job, config).map_err(|e| Exit::bad_input(format!("{}: {e}", path.display())))
}

/// Print diagnostics; fail if any is an error.
fn report_diagnostics(diags: &[Diagnostic]) -> Result<(), Exit> {
    for d in diags {
        eprintln!("{d}");
    }
    let errors = diags.iter().filter(|d| d.severity == Severity::Error).count();
    if errors > 0 {
        return Err(Exit::bad_input(format!("{errors} validation error(s)")));
    }
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn sim_params(args: &SimArgs, config: &RunConfig) -> SimParams {
    SimParams {
        seed: args.seed,
        spot_price: args.spot_price.unwrap_or(config.max_price_per_hour / 2.0),
        price_volatility: args.price_volatility,
        price_step_s: args.price_step_s,
        interruption_rate_per_hour: args.interruption_rate,
        startup_delay_s: args.startup_delay,
        fleet_tick_s: args.fleet_tick,
        task_duration_s: args.task_duration,
        task_jitter_s: args.task_jitter,
        failure_probability: args.failure_probability,
        deny: args.deny.clone(),
    }
}

fn load_run(state: &StateArgs) -> Result<(RunState, LocalBackend), Exit> {
    let app = current_app(&state.state_dir, state.app.as_deref())?
        .ok_or_else(|| Exit::phase(format!("no run has been set up in {}", state.state_dir.display())))?;
    let run = RunState::load(&state.state_dir, &app)?
        .ok_or_else(|| Exit::phase(format!("run `{app}` has not been set up")))?;
    let backend = LocalBackend::new(&state.state_dir, &app);
    Ok((run, backend))
}

fn backend_now(run: &RunState) -> Timestamp {
    match run.backend {
        BackendKind::Sim => run.sim_now,
        BackendKind::Local => WallClock.now(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn setup(
    config_path: &Path,
    fleet_path: &Path,
    backend: BackendKind,
    force: bool,
    declared_outputs: Vec<String>,
    sim: &SimArgs,
    state: &StateArgs,
) -> Outcome {
    let config = load_config(config_path)?;
    let fleet = load_fleet(fleet_path)?;
    report_diagnostics(&validate_run(&config, &fleet, None))?;

    let app = config.app_name.clone();
    if RunState::exists(&state.state_dir, &app) {
        if !force {
            return Err(Exit::phase(format!(
                "a run named `{app}` already exists; pass --force to replace it"
            )));
        }
        fs::remove_dir_all(run_dir(&state.state_dir, &app))?;
    }

    let params = sim_params(sim, &config);
    let market = match backend {
        BackendKind::Sim => params.market(),
        BackendKind::Local => MarketModel::constant(0.0),
    };
    let world = World::setup(config.clone(), fleet, market)?;
    let taskdef = world
        .cluster
        .task_definition(&app)
        .map(|t| t.taskdef_id.clone())
        .unwrap_or_default();
    LocalBackend::new(&state.state_dir, &app).create(&world)?;
    RunState {
        app_name: app.clone(),
        backend,
        config_path: absolute(config_path),
        fleet_path: absolute(fleet_path),
        job_path: None,
        sim: params,
        declared_outputs: if declared_outputs.is_empty() {
            vec!["*".to_string()]
        } else {
            declared_outputs
        },
        phases: Phases {
            setup_done: true,
            ..Phases::default()
        },
        sim_now: Timestamp::ZERO,
    }
    .save(&state.state_dir)?;

    println!("queue: {}", config.queue_name());
    println!("dead-letter queue: {}", config.dead_letter_name());
    println!("task definition: {taskdef}");
    println!("log group: {}", config.log_group());
    Ok(0)
}

pub fn submit_jobs(jobs: &Path, requeue: bool, state: &StateArgs) -> Outcome {
    let (mut run, backend) = load_run(state)?;
    if run.phases.torn_down {
        return Err(Exit::phase(format!("run `{}` has been torn down", run.app_name)));
    }
    if run.phases.jobs_submitted && !requeue {
        return Err(Exit::phase(format!(
            "jobs were already submitted to `{}`; pass --requeue to add more",
            run.app_name
        )));
    }
    let (config, fleet) = backend.read(|w| (w.config.clone(), w.fleet_spec.clone()))?;
    let tasks = load_tasks(jobs, &config)?;
    for d in validate_run(&config, &fleet, Some(tasks.len())) {
        eprintln!("{d}");
    }
    let now = backend_now(&run);
    let n = backend.transact(|w| w.submit(&tasks, now))?;
    run.phases.jobs_submitted = true;
    run.job_path = Some(absolute(jobs));
    run.save(&state.state_dir)?;
    println!("submitted {n} tasks");
    Ok(0)
}

pub fn start_cluster(state: &StateArgs) -> Outcome {
    let (mut run, backend) = load_run(state)?;
    if run.phases.torn_down {
        return Err(Exit::phase(format!("run `{}` has been torn down", run.app_name)));
    }
    if run.phases.cluster_started {
        return Err(Exit::phase(format!("fleet for `{}` is already active", run.app_name)));
    }
    let now = backend_now(&run);
    let fleet_id = match run.backend {
        BackendKind::Sim => {
            let delay = run.sim.startup_delay_s;
            backend.transact(|w| w.start_cluster(delay, now))?
        }
        BackendKind::Local => {
            let fleet_id = backend.transact(|w| w.start_cluster(0, now))?;
            spawn_daemon(&backend, &state.state_dir, &run.app_name)?;
            fleet_id
        }
    };
    run.phases.cluster_started = true;
    run.save(&state.state_dir)?;
    println!("{fleet_id}");
    Ok(0)
}

fn spawn_daemon(backend: &LocalBackend, state_dir: &Path, app: &str) -> Result<(), Exit> {
    let ready = backend.dir().join("daemon.ready");
    let _ = fs::remove_file(&ready);
    let log = fs::File::create(backend.dir().join("daemon.log"))?;
    let exe = std::env::current_exe()?;
    Command::new(exe)
        .arg("__cluster-daemon")
        .arg("--state-dir")
        .arg(absolute(state_dir))
        .arg("--app")
        .arg(app)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(log)
        .spawn()?;
    let deadline = Instant::now() + DAEMON_READY_TIMEOUT;
    while !ready.exists() {
        if Instant::now() > deadline {
            return Err(Exit::internal("cluster daemon did not start"));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(())
}

pub fn cluster_daemon(state: &StateArgs) -> Outcome {
    let (run, backend) = load_run(state)?;
    let _claim = backend.claim_daemon()?;
    fs::write(backend.dir().join("daemon.ready"), b"")?;
    let config = backend.read(|w| w.config.clone())?;
    let executor = LocalCommandExecutor {
        command_template: config.command_template.clone(),
        scratch_root: backend.scratch_root(),
        declared_outputs: run.declared_outputs.clone(),
    };
    let stop = AtomicBool::new(false);
    Arc::new(backend).run_daemon(executor, DAEMON_TICK, &stop)?;
    Ok(0)
}

fn write_report(report: &FinalReport, path: Option<&Path>, run_dir: Option<&Path>) -> Result<(), Exit> {
    let text = report.to_json();
    if let Some(dir) = run_dir {
        fs::write(dir.join("report.json"), &text)?;
    }
    if let Some(path) = path {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, &text)?;
    }
    let t = &report.tasks;
    println!(
        "succeeded {} failed {} skipped {} stale acks {} dead-lettered {}",
        t.succeeded,
        t.failed,
        t.skipped,
        t.stale_acks,
        report.dlq_task_ids.len()
    );
    for id in &report.dlq_task_ids {
        println!("dead-lettered: {id}");
    }
    println!(
        "cost: total ${:.6} (compute ${:.6}, monitoring ${:.6})",
        report.ledger.total, report.ledger.compute_total, report.ledger.monitoring_overhead
    );
    Ok(())
}

fn exit_for(report: &FinalReport) -> u8 {
    if report.is_clean() {
        0
    } else {
        EXIT_FAILURES
    }
}

pub fn monitor(report_path: Option<&Path>, delete_logs: bool, export_dir: Option<PathBuf>, state: &StateArgs) -> Outcome {
    let (mut run, backend) = load_run(state)?;
    if !run.phases.cluster_started {
        return Err(Exit::phase(format!("cluster for `{}` has not been started", run.app_name)));
    }
    let export = export_dir.unwrap_or_else(|| backend.export_dir());
    let report = if run.phases.torn_down {
        backend
            .read(|w| w.final_report.clone())?
            .ok_or_else(|| Exit::internal("run is marked torn down but has no report"))?
    } else {
        let report = match run.backend {
            BackendKind::Sim => {
                let world = backend.read(|w| w.clone())?;
                let store = backend.store()?;
                let options = run.sim.options(Some(export), delete_logs);
                let mut sim = Simulation::from_world(world, &store, options, run.sim_now)?;
                let report = sim.run()?;
                let (world, stats, now) = sim.into_parts();
                if stats.horizon_hit {
                    eprintln!("warning: simulation hit its horizon; teardown was forced");
                }
                backend.create(&world)?;
                run.sim_now = now;
                report
            }
            BackendKind::Local => {
                let stop = AtomicBool::new(false);
                let report = backend.run_monitor(&WallClock, delete_logs, &export, &stop)?;
                if !backend.wait_for_daemon(DAEMON_EXIT_TIMEOUT)? {
                    eprintln!("warning: cluster daemon is still running");
                }
                report
            }
        };
        run.phases.torn_down = true;
        run.save(&state.state_dir)?;
        report
    };
    write_report(&report, report_path, Some(backend.dir()))?;
    Ok(exit_for(&report))
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    config_path: &Path,
    fleet_path: &Path,
    jobs_path: &Path,
    report_path: Option<&Path>,
    export_dir: Option<PathBuf>,
    store_root: Option<PathBuf>,
    delete_logs: bool,
    sim: &SimArgs,
) -> Outcome {
    let config = load_config(config_path)?;
    let fleet = load_fleet(fleet_path)?;
    let tasks = load_tasks(jobs_path, &config)?;
    report_diagnostics(&validate_run(&config, &fleet, Some(tasks.len())))?;

    let export = export_dir.or_else(|| report_path.map(|p| PathBuf::from(format!("{}.export", p.display()))));
    let params = sim_params(sim, &config);
    let store: Box<dyn ObjectStore> = match store_root {
        Some(root) => Box::new(FsStore::new(root).map_err(Error::from)?),
        None => Box::new(MemoryStore::new()),
    };
    let mut simulation = Simulation::new(
        config,
        fleet,
        &tasks,
        params.market(),
        store.as_ref(),
        params.options(export, delete_logs),
    )?;
    let report = simulation.run()?;
    if simulation.stats().horizon_hit {
        eprintln!("warning: simulation hit its horizon; teardown was forced");
    }
    write_report(&report, report_path, None)?;
    Ok(exit_for(&report))
}
