//! Local-process backend.
//!
//! The [`World`] lives in `<state_dir>/<app>/world.json`; every operation is a
//! transaction under an exclusive lock on `world.lock`, so separate command
//! invocations and the agent threads of the cluster daemon all see one
//! consistent state. Outputs go to a filesystem store under the same
//! directory. Time is the wall clock.

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::clock::{Clock, Timestamp, WallClock};
use crate::error::{Error, Result};
use crate::monitor::{self, FinalReport};
use crate::objectstore::{FsStore, ObjectStore};
use crate::placement::PlacementAction;
use crate::queue::Receipt;
use crate::specfiles::{Parameters, TaskMessage};
use crate::telemetry::LogLevel;
use crate::worker::{run_agent, Agent, AgentServices, AgentSettings, Executor, LocalCommandExecutor, TaskResult};
use crate::world::World;

#[derive(Debug, Clone)]
pub struct LocalBackend {
    dir: PathBuf,
}

impl LocalBackend {
    pub fn new(state_dir: &Path, app_name: &str) -> Self {
        LocalBackend {
            dir: state_dir.join(app_name),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn world_path(&self) -> PathBuf {
        self.dir.join("world.json")
    }

    pub fn store_root(&self) -> PathBuf {
        self.dir.join("store")
    }

    pub fn scratch_root(&self) -> PathBuf {
        self.dir.join("scratch")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.dir.join("export")
    }

    pub fn store(&self) -> Result<FsStore> {
        Ok(FsStore::new(self.store_root())?)
    }

    pub fn exists(&self) -> bool {
        self.world_path().exists()
    }

    fn lock_file(&self, name: &str) -> Result<File> {
        fs::create_dir_all(&self.dir)?;
        Ok(OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(name))?)
    }

    fn save(&self, world: &World) -> Result<()> {
        let tmp = self.dir.join("world.json.tmp");
        let mut file = File::create(&tmp)?;
        serde_json::to_writer(&mut file, world)?;
        file.write_all(b"\n")?;
        file.sync_all()?;
        fs::rename(&tmp, self.world_path())?;
        Ok(())
    }

    fn load(&self) -> Result<World> {
        let bytes = fs::read(self.world_path()).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotSetUp(self.dir.display().to_string()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Write a fresh world, replacing any previous state.
    pub fn create(&self, world: &World) -> Result<()> {
        let lock = self.lock_file("world.lock")?;
        lock.lock()?;
        self.save(world)
    }

    /// Run `f` against the current world and persist the result if it
    /// succeeds. A failed transaction leaves the stored state untouched.
    pub fn transact<T>(&self, f: impl FnOnce(&mut World) -> Result<T>) -> Result<T> {
        let lock = self.lock_file("world.lock")?;
        lock.lock()?;
        let mut world = self.load()?;
        let out = f(&mut world)?;
        self.save(&world)?;
        Ok(out)
    }

    pub fn read<T>(&self, f: impl FnOnce(&World) -> T) -> Result<T> {
        let lock = self.lock_file("world.lock")?;
        lock.lock_shared()?;
        Ok(f(&self.load()?))
    }

    /// Hold the daemon lock for the life of the returned file.
    pub fn claim_daemon(&self) -> Result<File> {
        let file = self.lock_file("daemon.lock")?;
        file.lock()?;
        Ok(file)
    }

    /// Wait until no daemon holds its lock, or `timeout` passes. Returns
    /// whether the daemon is gone.
    pub fn wait_for_daemon(&self, timeout: Duration) -> Result<bool> {
        let file = self.lock_file("daemon.lock")?;
        let deadline = Instant::now() + timeout;
        loop {
            match file.try_lock() {
                Ok(()) => return Ok(true),
                Err(TryLockError::WouldBlock) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(TryLockError::WouldBlock) => return Ok(false),
                Err(TryLockError::Error(e)) => return Err(e.into()),
            }
        }
    }

    /// Drive the fleet, placements and agent threads until the fleet is
    /// cancelled and every agent has exited, or `stop` is raised.
    pub fn run_daemon(self: &Arc<Self>, executor: LocalCommandExecutor, tick: Duration, stop: &AtomicBool) -> Result<()> {
        let clock = Arc::new(WallClock);
        let store: Arc<dyn ObjectStore> = Arc::new(self.store()?);
        let mut agents: Vec<(String, Arc<AtomicBool>, JoinHandle<()>)> = Vec::new();
        loop {
            let now = clock.now();
            let (actions, cancelled, config) = self.transact(|w| {
                let actions = w.fleet_tick(now)?;
                for a in &actions {
                    if let PlacementAction::Start { placement_id, .. } = a {
                        w.cluster.mark_running(placement_id)?;
                    }
                }
                let cancelled = w.fleet().is_none_or(|f| f.is_cancelled());
                Ok((actions, cancelled, w.config.clone()))
            })?;
            for action in actions {
                match action {
                    PlacementAction::Stop { placement_id, .. } => {
                        if let Some((_, flag, _)) = agents.iter().find(|(id, _, _)| *id == placement_id) {
                            flag.store(true, Ordering::SeqCst);
                        }
                    }
                    PlacementAction::Start {
                        placement_id,
                        instance_id,
                        ..
                    } => {
                        let flag = Arc::new(AtomicBool::new(false));
                        let backend = Arc::clone(self);
                        let (clock, store, thread_flag) = (Arc::clone(&clock), Arc::clone(&store), Arc::clone(&flag));
                        let mut agent = Agent::new(
                            placement_id.clone(),
                            instance_id,
                            config.clone(),
                            Executor::LocalCommand(executor.clone()),
                            AgentSettings::for_config(&config),
                        );
                        let id = placement_id.clone();
                        let handle = std::thread::spawn(move || {
                            run_agent(&mut agent, backend.as_ref(), store.as_ref(), clock.as_ref(), &thread_flag);
                            if let Err(e) = backend.transact(|w| Ok(w.cluster.mark_stopped(&id)?)) {
                                tracing::warn!(placement = %id, "could not mark agent stopped: {e}");
                            }
                        });
                        agents.push((placement_id, flag, handle));
                    }
                }
            }
            let (finished, live): (Vec<_>, Vec<_>) = agents.into_iter().partition(|(_, _, h)| h.is_finished());
            for (_, _, handle) in finished {
                let _ = handle.join();
            }
            agents = live;
            if stop.load(Ordering::SeqCst) {
                for (_, flag, _) in &agents {
                    flag.store(true, Ordering::SeqCst);
                }
            }
            if (cancelled || stop.load(Ordering::SeqCst)) && agents.is_empty() {
                return Ok(());
            }
            clock.sleep_until(clock.now().plus_millis(tick.as_millis() as u64), stop);
        }
    }

    /// Tick the monitor every period until teardown. Only one monitor may
    /// run per app; a run that is already torn down returns its stored report.
    pub fn run_monitor(
        &self,
        clock: &dyn Clock,
        delete_logs: bool,
        export: &Path,
        stop: &AtomicBool,
    ) -> Result<FinalReport> {
        if let Some(report) = self.read(|w| w.final_report.clone())? {
            return Ok(report);
        }
        let lock = self.lock_file("monitor.lock")?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(Error::MonitorLocked(self.dir.display().to_string())),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }
        loop {
            let now = clock.now();
            let (report, period) = self.transact(|w| {
                w.monitor.delete_logs |= delete_logs;
                monitor::monitor_tick(w, now, Some(export))?;
                Ok((w.final_report.clone(), w.monitor.period_s))
            })?;
            if let Some(report) = report {
                return Ok(report);
            }
            if stop.load(Ordering::SeqCst) {
                let now = clock.now();
                return self.transact(|w| {
                    monitor::teardown(w, now, Some(export))?;
                    Ok(w.final_report.clone().expect("teardown writes a report"))
                });
            }
            clock.sleep_until(now.plus_secs(u64::from(period)), stop);
        }
    }
}

impl AgentServices for LocalBackend {
    fn lease(&self, now: Timestamp) -> Result<Option<(TaskMessage, Receipt)>> {
        self.transact(|w| w.lease(now))
    }

    fn extend_lease(&self, receipt: &Receipt, extra_s: u32, now: Timestamp) -> Result<Receipt> {
        self.transact(|w| w.extend_lease(receipt, extra_s, now))
    }

    fn ack(&self, receipt: &Receipt, now: Timestamp) -> Result<()> {
        self.transact(|w| w.ack(receipt, now))
    }

    fn log(
        &self,
        stream_id: &str,
        tags: Option<&Parameters>,
        severity: LogLevel,
        line: &str,
        now: Timestamp,
    ) -> Result<()> {
        self.transact(|w| w.log(stream_id, tags, severity, line, now))
    }

    fn record(&self, result: &TaskResult, stale_ack: bool) -> Result<()> {
        self.transact(|w| {
            w.record(result, stale_ack);
            Ok(())
        })
    }
}
