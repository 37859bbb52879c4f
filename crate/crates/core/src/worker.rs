//! The agent that runs inside every placed container.
//!
//! An agent loops: lease a message, skip it if its outputs already exist,
//! otherwise execute it while heartbeating the lease, upload outputs, then
//! ack. Failures are logged and left un-acked so the lease expires and the
//! queue redelivers (or eventually dead-letters) the message.
//!
//! [`Agent`] is a resumable state machine so the same logic runs under the
//! discrete-event simulation (which wakes it at scheduled instants) and under
//! [`run_agent`] (which sleeps on a [`Clock`] between steps).

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::error::Error;
use crate::objectstore::{ObjectStore, StoreError};
use crate::queue::{QueueError, Receipt};
use crate::specfiles::{Parameters, RunConfig, Scalar, TaskMessage};
use crate::telemetry::LogLevel;

pub const DEFAULT_POLL_INTERVAL_S: u64 = 5;
pub const DEFAULT_MAX_EMPTY_POLLS: u32 = 5;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("command template references `{{{0}}}` but the task has no such parameter")]
    UnboundPlaceholder(String),
    #[error("execution failed: {0}")]
    ExecutionFailed(String),
    #[error("command exited 0 but declared output `{0}` is missing")]
    MissingDeclaredOutput(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("scratch i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Deterministic stand-in for the containerized tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedExecutor {
    pub seed: u64,
    pub base_duration_s: u64,
    /// Uniform extra duration in `[0, jitter_s]`, fixed per task.
    pub jitter_s: u64,
    /// Chance that any one attempt fails, drawn per (task, attempt).
    pub failure_probability: f64,
    /// Tasks that fail on every attempt.
    pub deny_list: BTreeSet<String>,
}

impl Default for SimulatedExecutor {
    fn default() -> Self {
        SimulatedExecutor {
            seed: 0,
            base_duration_s: 60,
            jitter_s: 60,
            failure_probability: 0.0,
            deny_list: BTreeSet::new(),
        }
    }
}

impl SimulatedExecutor {
    fn rng_for(&self, task_id: &str, salt: u64) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(salt.to_le_bytes());
        hasher.update(task_id.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn duration_ms(&self, msg: &TaskMessage) -> u64 {
        let jitter_ms = self.jitter_s * 1000;
        let extra = if jitter_ms == 0 {
            0
        } else {
            self.rng_for(&msg.task_id, u64::MAX).random_range(0..=jitter_ms)
        };
        self.base_duration_s * 1000 + extra
    }

    pub fn fails(&self, msg: &TaskMessage, attempt: u32) -> bool {
        if self.deny_list.contains(&msg.task_id) {
            return true;
        }
        self.failure_probability > 0.0
            && self.rng_for(&msg.task_id, u64::from(attempt)).random::<f64>() < self.failure_probability
    }
}

/// Runs the rendered command as a subprocess in a per-task scratch directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalCommandExecutor {
    pub command_template: String,
    pub scratch_root: PathBuf,
    /// Glob patterns relative to the scratch directory.
    pub declared_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Executor {
    Simulated(SimulatedExecutor),
    LocalCommand(LocalCommandExecutor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Success,
    Failure,
    SkippedDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub status: TaskStatus,
    pub wall_seconds: f64,
    pub outputs_written: u32,
    pub log_key: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReport {
    pub succeeded: u64,
    pub failed: u64,
    pub skipped: u64,
    pub stale_acks: u64,
}

impl AgentReport {
    pub fn absorb(&mut self, result: &TaskResult, stale_ack: bool) {
        match result.status {
            TaskStatus::Success => self.succeeded += 1,
            TaskStatus::Failure => self.failed += 1,
            TaskStatus::SkippedDone => self.skipped += 1,
        }
        if stale_ack {
            self.stale_acks += 1;
        }
    }

    pub fn merge(&mut self, other: &AgentReport) {
        self.succeeded += other.succeeded;
        self.failed += other.failed;
        self.skipped += other.skipped;
        self.stale_acks += other.stale_acks;
    }
}

/// What an agent needs from the control plane. Implementations serialize
/// access to shared state; every call is atomic.
pub trait AgentServices: Send + Sync {
    fn lease(&self, now: Timestamp) -> Result<Option<(TaskMessage, Receipt)>, Error>;
    fn extend_lease(&self, receipt: &Receipt, extra_s: u32, now: Timestamp) -> Result<Receipt, Error>;
    fn ack(&self, receipt: &Receipt, now: Timestamp) -> Result<(), Error>;
    fn log(
        &self,
        stream_id: &str,
        tags: Option<&Parameters>,
        severity: LogLevel,
        line: &str,
        now: Timestamp,
    ) -> Result<(), Error>;
    fn record(&self, result: &TaskResult, stale_ack: bool) -> Result<(), Error>;
}

/// True iff the task's output prefix already holds the expected file count.
pub fn check_done(store: &dyn ObjectStore, msg: &TaskMessage, config: &RunConfig) -> Result<bool, StoreError> {
    if !config.done_check.enabled {
        return Ok(false);
    }
    let have = store.count_prefix(&format!("{}/", msg.output_prefix))?;
    Ok(have >= config.done_check.expected_file_count as usize)
}

/// Substitute `{name}` placeholders and split into arguments.
///
/// The template is split on whitespace first, so a substituted value always
/// stays inside one argument whatever it contains.
pub fn render_command(template: &str, msg: &TaskMessage) -> Result<Vec<String>, TaskError> {
    template
        .split_whitespace()
        .map(|token| substitute(token, &msg.parameters))
        .collect()
}

fn substitute(token: &str, params: &Parameters) -> Result<String, TaskError> {
    let mut out = String::with_capacity(token.len());
    let mut rest = token;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if crate::specfiles::is_param_key(&after[..close]) => {
                let name = &after[..close];
                let value = params
                    .get(name)
                    .ok_or_else(|| TaskError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(&value.to_string());
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Tags for a task's log stream: its parameters plus the instance it ran on.
pub fn stream_tags(msg: &TaskMessage, instance_id: &str) -> Parameters {
    let mut tags = msg.parameters.clone();
    tags.entry("instance_id".to_string())
        .or_insert_with(|| Scalar::Str(instance_id.to_string()));
    tags
}

struct ScratchDir(PathBuf);

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

/// Run a local command to completion and upload its declared outputs.
/// Returns the number of objects written.
pub fn execute_local(
    exec: &LocalCommandExecutor,
    msg: &TaskMessage,
    store: &dyn ObjectStore,
    sink: &mut dyn FnMut(LogLevel, &str),
) -> Result<u32, TaskError> {
    let argv = render_command(&exec.command_template, msg)?;
    let Some((program, args)) = argv.split_first() else {
        return Err(TaskError::ExecutionFailed("empty command".to_string()));
    };
    let dir = exec.scratch_root.join(&msg.task_id);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let scratch = ScratchDir(dir);

    let mut cmd = Command::new(program);
    cmd.args(args).current_dir(&scratch.0);
    for (k, v) in &msg.parameters {
        cmd.env(format!("DS_PARAM_{k}"), v.to_string());
    }
    cmd.env("DS_TASK_ID", &msg.task_id)
        .env("DS_OUTPUT_PREFIX", &msg.output_prefix);
    let output = cmd
        .output()
        .map_err(|e| TaskError::ExecutionFailed(format!("could not start `{program}`: {e}")))?;
    for line in String::from_utf8_lossy(&output.stdout).lines() {
        sink(LogLevel::Info, line);
    }
    for line in String::from_utf8_lossy(&output.stderr).lines() {
        sink(LogLevel::Warn, line);
    }
    if !output.status.success() {
        return Err(TaskError::ExecutionFailed(format!("`{program}` {}", output.status)));
    }

    let mut files = Vec::new();
    for pattern in &exec.declared_outputs {
        let full = format!(
            "{}/{}",
            glob::Pattern::escape(&scratch.0.to_string_lossy()),
            pattern
        );
        let mut matched: Vec<PathBuf> = glob::glob(&full)
            .map_err(|e| TaskError::ExecutionFailed(format!("bad output pattern `{pattern}`: {e}")))?
            .filter_map(Result::ok)
            .filter(|p| p.is_file())
            .collect();
        if matched.is_empty() {
            return Err(TaskError::MissingDeclaredOutput(pattern.clone()));
        }
        matched.sort();
        files.extend(matched);
    }
    files.dedup();
    for path in &files {
        let key = format!("{}/{}", msg.output_prefix, relative_key(&scratch.0, path));
        store.put(&key, &fs::read(path)?)?;
    }
    Ok(files.len() as u32)
}

fn relative_key(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Write the outputs a successful simulated execution leaves behind.
pub fn write_simulated_outputs(
    store: &dyn ObjectStore,
    msg: &TaskMessage,
    count: u32,
    attempt: u32,
) -> Result<u32, StoreError> {
    for i in 0..count {
        let key = format!("{}/part-{i:03}.out", msg.output_prefix);
        let body = format!("{} attempt {attempt} part {i}\n", msg.task_id);
        store.put(&key, body.as_bytes())?;
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSettings {
    pub poll_interval_ms: u64,
    pub max_empty_polls: u32,
    pub heartbeat_ms: u64,
}

impl AgentSettings {
    pub fn for_config(config: &RunConfig) -> Self {
        AgentSettings {
            poll_interval_ms: DEFAULT_POLL_INTERVAL_S * 1000,
            max_empty_polls: DEFAULT_MAX_EMPTY_POLLS,
            heartbeat_ms: (u64::from(config.visibility_timeout_s) * 1000 / 3).max(1),
        }
    }
}

/// When the agent wants to run next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wake {
    At(Timestamp),
    Exit,
}

#[derive(Debug, Clone)]
struct RunningTask {
    msg: TaskMessage,
    receipt: Receipt,
    attempt: u32,
    stream_id: String,
    started: Timestamp,
    finish_at: Timestamp,
    next_heartbeat: Timestamp,
    fails: bool,
}

#[derive(Debug, Clone)]
enum Phase {
    Polling,
    Running(Box<RunningTask>),
    Exited,
}

#[derive(Debug)]
pub struct Agent {
    agent_id: String,
    instance_id: String,
    config: RunConfig,
    executor: Executor,
    settings: AgentSettings,
    phase: Phase,
    empty_polls: u32,
    report: AgentReport,
}

impl Agent {
    pub fn new(
        agent_id: impl Into<String>,
        instance_id: impl Into<String>,
        config: RunConfig,
        executor: Executor,
        settings: AgentSettings,
    ) -> Self {
        Agent {
            agent_id: agent_id.into(),
            instance_id: instance_id.into(),
            config,
            executor,
            settings,
            phase: Phase::Polling,
            empty_polls: 0,
            report: AgentReport::default(),
        }
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn report(&self) -> AgentReport {
        self.report
    }

    /// True while a leased task is executing.
    pub fn is_busy(&self) -> bool {
        matches!(self.phase, Phase::Running(_))
    }

    fn log(&self, svc: &dyn AgentServices, stream: &str, level: LogLevel, line: &str, now: Timestamp) {
        if let Err(e) = svc.log(stream, None, level, line, now) {
            tracing::warn!(agent = %self.agent_id, "log append failed: {e}");
        }
    }

    fn finish(&mut self, svc: &dyn AgentServices, result: TaskResult, stale_ack: bool) {
        self.report.absorb(&result, stale_ack);
        if let Err(e) = svc.record(&result, stale_ack) {
            tracing::warn!(agent = %self.agent_id, "recording result failed: {e}");
        }
    }

    fn ack(&mut self, svc: &dyn AgentServices, receipt: &Receipt, stream: &str, now: Timestamp) -> bool {
        match svc.ack(receipt, now) {
            Ok(()) => false,
            Err(e) => {
                self.log(
                    svc,
                    stream,
                    LogLevel::Warn,
                    &format!("ack rejected ({e}); task may run again elsewhere"),
                    now,
                );
                true
            }
        }
    }

    /// Advance the agent by one unit of work at the clock's current time.
    pub fn step(&mut self, svc: &dyn AgentServices, store: &dyn ObjectStore, clock: &dyn Clock) -> Wake {
        let now = clock.now();
        match std::mem::replace(&mut self.phase, Phase::Polling) {
            Phase::Exited => {
                self.phase = Phase::Exited;
                Wake::Exit
            }
            Phase::Running(task) => self.continue_simulated(*task, svc, store, now),
            Phase::Polling => self.poll(svc, store, clock, now),
        }
    }

    fn poll(
        &mut self,
        svc: &dyn AgentServices,
        store: &dyn ObjectStore,
        clock: &dyn Clock,
        now: Timestamp,
    ) -> Wake {
        let leased = match svc.lease(now) {
            Ok(leased) => leased,
            Err(Error::Queue(QueueError::QueueDeleted(_) | QueueError::NoSuchQueue(_))) => {
                self.phase = Phase::Exited;
                return Wake::Exit;
            }
            Err(e) => {
                tracing::warn!(agent = %self.agent_id, "lease failed: {e}");
                None
            }
        };
        let Some((msg, receipt)) = leased else {
            self.empty_polls += 1;
            if self.empty_polls >= self.settings.max_empty_polls {
                self.phase = Phase::Exited;
                return Wake::Exit;
            }
            return Wake::At(now.plus_millis(self.settings.poll_interval_ms));
        };
        self.empty_polls = 0;

        let attempt = receipt.receive_count;
        let stream_id = format!("{}.{}.{}", msg.task_id, receipt.message_id, attempt);
        let tags = stream_tags(&msg, &self.instance_id);
        if let Err(e) = svc.log(
            &stream_id,
            Some(&tags),
            LogLevel::Info,
            &format!(
                "agent {} on {} leased {} (attempt {attempt})",
                self.agent_id, self.instance_id, receipt.message_id
            ),
            now,
        ) {
            tracing::warn!(agent = %self.agent_id, "log stream creation failed: {e}");
        }

        match check_done(store, &msg, &self.config) {
            Ok(true) => {
                self.log(svc, &stream_id, LogLevel::Info, "outputs already present; skipping", now);
                let stale = self.ack(svc, &receipt, &stream_id, now);
                let result = TaskResult {
                    task_id: msg.task_id.clone(),
                    status: TaskStatus::SkippedDone,
                    wall_seconds: 0.0,
                    outputs_written: 0,
                    log_key: stream_id,
                };
                self.finish(svc, result, stale);
                return Wake::At(now);
            }
            Ok(false) => {}
            Err(e) => self.log(svc, &stream_id, LogLevel::Warn, &format!("done-check failed: {e}"), now),
        }

        match &self.executor {
            Executor::Simulated(sim) => {
                let duration = sim.duration_ms(&msg);
                let task = RunningTask {
                    fails: sim.fails(&msg, attempt),
                    msg,
                    receipt,
                    attempt,
                    stream_id,
                    started: now,
                    finish_at: now.plus_millis(duration),
                    next_heartbeat: now.plus_millis(self.settings.heartbeat_ms),
                };
                let wake = task.next_heartbeat.min(task.finish_at);
                self.phase = Phase::Running(Box::new(task));
                Wake::At(wake)
            }
            Executor::LocalCommand(local) => {
                let local = local.clone();
                self.run_local(&local, msg, receipt, stream_id, svc, store, clock, now)
            }
        }
    }

    fn continue_simulated(
        &mut self,
        mut task: RunningTask,
        svc: &dyn AgentServices,
        store: &dyn ObjectStore,
        now: Timestamp,
    ) -> Wake {
        if now < task.finish_at {
            if now >= task.next_heartbeat {
                match svc.extend_lease(&task.receipt, self.config.visibility_timeout_s, now) {
                    Ok(fresh) => task.receipt = fresh,
                    Err(e) => self.log(svc, &task.stream_id, LogLevel::Warn, &format!("heartbeat failed: {e}"), now),
                }
                task.next_heartbeat = now.plus_millis(self.settings.heartbeat_ms);
            }
            let wake = task.next_heartbeat.min(task.finish_at);
            self.phase = Phase::Running(Box::new(task));
            return Wake::At(wake);
        }

        let wall_seconds = now.millis_since(task.started) as f64 / 1000.0;
        let outcome = if task.fails {
            Err(TaskError::ExecutionFailed("simulated failure".to_string()))
        } else {
            write_simulated_outputs(store, &task.msg, self.config.expected_outputs(), task.attempt)
                .map_err(TaskError::from)
        };
        self.complete(svc, &task.msg, &task.receipt, &task.stream_id, outcome, wall_seconds, now);
        Wake::At(now)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_local(
        &mut self,
        exec: &LocalCommandExecutor,
        msg: TaskMessage,
        receipt: Receipt,
        stream_id: String,
        svc: &dyn AgentServices,
        store: &dyn ObjectStore,
        clock: &dyn Clock,
        started: Timestamp,
    ) -> Wake {
        let current = Mutex::new(receipt);
        let done = AtomicBool::new(false);
        let vt = self.config.visibility_timeout_s;
        let heartbeat_ms = self.settings.heartbeat_ms;
        let outcome = std::thread::scope(|scope| {
            scope.spawn(|| {
                let mut next = started.plus_millis(heartbeat_ms);
                loop {
                    clock.sleep_until(next, &done);
                    if done.load(Ordering::SeqCst) {
                        break;
                    }
                    let now = clock.now();
                    let mut receipt = current.lock().expect("receipt lock");
                    match svc.extend_lease(&receipt, vt, now) {
                        Ok(fresh) => *receipt = fresh,
                        Err(e) => {
                            let _ = svc.log(&stream_id, None, LogLevel::Warn, &format!("heartbeat failed: {e}"), now);
                        }
                    }
                    next = now.plus_millis(heartbeat_ms);
                }
            });
            let mut sink = |level: LogLevel, line: &str| {
                let _ = svc.log(&stream_id, None, level, line, clock.now());
            };
            let outcome = execute_local(exec, &msg, store, &mut sink);
            done.store(true, Ordering::SeqCst);
            outcome
        });
        let now = clock.now();
        let receipt = current.into_inner().expect("receipt lock");
        let wall_seconds = now.millis_since(started) as f64 / 1000.0;
        self.complete(svc, &msg, &receipt, &stream_id, outcome, wall_seconds, now);
        Wake::At(now)
    }

    #[allow(clippy::too_many_arguments)]
    fn complete(
        &mut self,
        svc: &dyn AgentServices,
        msg: &TaskMessage,
        receipt: &Receipt,
        stream_id: &str,
        outcome: Result<u32, TaskError>,
        wall_seconds: f64,
        now: Timestamp,
    ) {
        let (status, outputs_written, stale) = match outcome {
            Ok(n) => {
                self.log(svc, stream_id, LogLevel::Info, &format!("succeeded; {n} outputs uploaded"), now);
                let stale = self.ack(svc, receipt, stream_id, now);
                (TaskStatus::Success, n, stale)
            }
            Err(e) => {
                self.log(svc, stream_id, LogLevel::Error, &format!("failed: {e}"), now);
                (TaskStatus::Failure, 0, false)
            }
        };
        let result = TaskResult {
            task_id: msg.task_id.clone(),
            status,
            wall_seconds,
            outputs_written,
            log_key: stream_id.to_string(),
        };
        self.finish(svc, result, stale);
    }
}

/// Drive one agent until it exits or `stop` is raised.
pub fn run_agent(
    agent: &mut Agent,
    svc: &dyn AgentServices,
    store: &dyn ObjectStore,
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> AgentReport {
    while !stop.load(Ordering::SeqCst) {
        match agent.step(svc, store, clock) {
            Wake::At(t) => clock.sleep_until(t, stop),
            Wake::Exit => break,
        }
    }
    agent.report()
}
