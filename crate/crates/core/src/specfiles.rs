//! The three human-edited input documents and job expansion.
//!
//! A run is described by a [`RunConfig`] (naming, machine count and size, bid
//! ceiling, per-agent reservations), a [`JobSpec`] (metadata shared between
//! tasks plus one metadata map per task) and a [`FleetSpec`] (account-specific
//! infrastructure identifiers). All three are strict JSON documents: unknown
//! keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectstore::validate_key;

/// Longest task id [`expand_jobs`] will produce.
pub const MAX_TASK_ID_LEN: usize = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error(
        "infeasible packing: {tasks_per_machine} agents x {per_task} {resource} exceeds machine {resource} {machine}"
    )]
    InfeasiblePacking {
        resource: &'static str,
        tasks_per_machine: u32,
        per_task: u32,
        machine: u32,
    },
    #[error("job file contains no tasks")]
    EmptyTaskList,
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
}

impl SpecError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SpecError::SchemaViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// A JSON scalar carried in job metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Str(s)
    }
}

impl From<i64> for Scalar {
    fn from(i: i64) -> Self {
        Scalar::Int(i)
    }
}

pub type Parameters = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineType {
    pub name: String,
    /// 1024 units = 1 vCPU.
    pub cpu_units: u32,
    pub memory_mb: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoneCheck {
    pub enabled: bool,
    pub expected_file_count: u32,
}

/// The per-run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub app_name: String,
    pub image_ref: String,
    pub machine_type: MachineType,
    pub fleet_size: u32,
    pub max_price_per_hour: f64,
    pub tasks_per_machine: u32,
    pub task_cpu_units: u32,
    pub task_memory_mb: u32,
    pub visibility_timeout_s: u32,
    pub max_receive_count: u32,
    pub output_prefix: String,
    pub done_check: DoneCheck,
    pub monitor_period_s: u32,
    pub teardown_hysteresis_ticks: u32,
    pub command_template: String,
}

impl RunConfig {
    pub fn queue_name(&self) -> String {
        format!("{}_queue", self.app_name)
    }

    pub fn dead_letter_name(&self) -> String {
        format!("{}_dead_letter", self.app_name)
    }

    pub fn fleet_name(&self) -> String {
        format!("{}_fleet", self.app_name)
    }

    pub fn log_group(&self) -> String {
        format!("{}_logs", self.app_name)
    }

    /// Objects a successful execution is expected to leave behind.
    pub fn expected_outputs(&self) -> u32 {
        if self.done_check.enabled {
            self.done_check.expected_file_count
        } else {
            1
        }
    }
}

/// The job file: metadata shared between tasks plus one map per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub shared: Parameters,
    pub tasks: Vec<Parameters>,
}

/// Account-specific infrastructure identifiers. Opaque to the sim and local
/// backends; validated for presence only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub account_id: String,
    pub region: String,
    pub subnet_ids: Vec<String>,
    pub security_group_ids: Vec<String>,
    pub instance_role: String,
    pub key_name: String,
}

/// One parallel unit of work as it travels through the queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMessage {
    pub task_id: String,
    pub parameters: Parameters,
    pub output_prefix: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warn,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Invalid,
    Packing,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn error(field: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            kind: DiagnosticKind::Invalid,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn warn(field: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warn,
            kind: DiagnosticKind::Advisory,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warn => "warn",
            Severity::Error => "error",
        };
        write!(f, "{sev}: {}: {}", self.field, self.message)
    }
}

fn parse_document<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, SpecError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| SpecError::MalformedDocument(format!("not UTF-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| SpecError::MalformedDocument(e.to_string()))?;
    serde_path_to_error::deserialize(value).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner().to_string();
        SpecError::SchemaViolation {
            field: field_path(&path, &inner),
            reason: inner,
        }
    })
}

/// serde reports missing/unknown fields at the enclosing object; point at the
/// field itself instead.
fn field_path(path: &str, message: &str) -> String {
    let parent = if path == "." { "" } else { path };
    for lead in ["missing field `", "unknown field `"] {
        if let Some(rest) = message.strip_prefix(lead) {
            if let Some(name) = rest.split('`').next() {
                // Unknown fields already carry their own name in the path.
                if parent == name || parent.ends_with(&format!(".{name}")) {
                    return parent.to_string();
                }
                return if parent.is_empty() {
                    name.to_string()
                } else {
                    format!("{parent}.{name}")
                };
            }
        }
    }
    if parent.is_empty() {
        "<root>".to_string()
    } else {
        parent.to_string()
    }
}

/// Canonical serialization: 2-space indentation, keys sorted.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("spec types always serialize");
    serde_json::to_string_pretty(&value).expect("values always serialize")
}

pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig, SpecError> {
    let config: RunConfig = parse_document(bytes)?;
    let diagnostics = config_diagnostics(&config);
    if let Some(d) = diagnostics
        .iter()
        .find(|d| d.severity == Severity::Error && d.kind == DiagnosticKind::Invalid)
    {
        return Err(SpecError::schema(&d.field, &d.message));
    }
    check_packing(&config)?;
    Ok(config)
}

pub fn parse_job_spec(bytes: &[u8]) -> Result<JobSpec, SpecError> {
    let job: JobSpec = parse_document(bytes)?;
    for key in job.shared.keys() {
        check_param_key(key, &format!("shared.{key}"))?;
    }
    for (i, task) in job.tasks.iter().enumerate() {
        for key in task.keys() {
            check_param_key(key, &format!("tasks[{i}].{key}"))?;
        }
    }
    if job.tasks.is_empty() {
        return Err(SpecError::EmptyTaskList);
    }
    Ok(job)
}

pub fn parse_fleet_spec(bytes: &[u8]) -> Result<FleetSpec, SpecError> {
    let fleet: FleetSpec = parse_document(bytes)?;
    if let Some(d) = fleet_diagnostics(&fleet).into_iter().next() {
        return Err(SpecError::schema(d.field, d.message));
    }
    Ok(fleet)
}

fn check_param_key(key: &str, path: &str) -> Result<(), SpecError> {
    if is_param_key(key) {
        Ok(())
    } else {
        Err(SpecError::schema(path, "keys must match [A-Za-z0-9_]+"))
    }
}

pub fn is_param_key(key: &str) -> bool {
    !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn is_app_name(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn check_packing(config: &RunConfig) -> Result<(), SpecError> {
    let tpm = config.tasks_per_machine;
    let checks = [
        ("cpu_units", config.task_cpu_units, config.machine_type.cpu_units),
        ("memory_mb", config.task_memory_mb, config.machine_type.memory_mb),
    ];
    for (resource, per_task, machine) in checks {
        if u64::from(tpm) * u64::from(per_task) > u64::from(machine) {
            return Err(SpecError::InfeasiblePacking {
                resource,
                tasks_per_machine: tpm,
                per_task,
                machine,
            });
        }
    }
    Ok(())
}

fn config_diagnostics(config: &RunConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !is_app_name(&config.app_name) {
        out.push(Diagnostic::error(
            "app_name",
            "must match [A-Za-z0-9_-]{1,64}",
        ));
    }
    if config.image_ref.trim().is_empty() {
        out.push(Diagnostic::error("image_ref", "must not be empty"));
    }
    if config.machine_type.name.trim().is_empty() {
        out.push(Diagnostic::error("machine_type.name", "must not be empty"));
    }
    let positives = [
        ("machine_type.cpu_units", config.machine_type.cpu_units),
        ("machine_type.memory_mb", config.machine_type.memory_mb),
        ("fleet_size", config.fleet_size),
        ("tasks_per_machine", config.tasks_per_machine),
        ("task_cpu_units", config.task_cpu_units),
        ("task_memory_mb", config.task_memory_mb),
        ("visibility_timeout_s", config.visibility_timeout_s),
        ("max_receive_count", config.max_receive_count),
        (
            "done_check.expected_file_count",
            config.done_check.expected_file_count,
        ),
        ("monitor_period_s", config.monitor_period_s),
        (
            "teardown_hysteresis_ticks",
            config.teardown_hysteresis_ticks,
        ),
    ];
    for (field, value) in positives {
        if value == 0 {
            out.push(Diagnostic::error(field, "must be a positive integer"));
        }
    }
    if !(config.max_price_per_hour.is_finite() && config.max_price_per_hour >= 0.0) {
        out.push(Diagnostic::error(
            "max_price_per_hour",
            "must be a non-negative amount in USD",
        ));
    }
    if validate_key(&config.output_prefix).is_err() || config.output_prefix.ends_with('/') {
        out.push(Diagnostic::error(
            "output_prefix",
            "must be a non-empty object key without leading or trailing '/'",
        ));
    }
    if config.tasks_per_machine > 0 {
        if let Err(e) = check_packing(config) {
            let field = match e {
                SpecError::InfeasiblePacking {
                    resource: "cpu_units",
                    ..
                } => "task_cpu_units",
                _ => "task_memory_mb",
            };
            out.push(Diagnostic {
                severity: Severity::Error,
                kind: DiagnosticKind::Packing,
                field: field.to_string(),
                message: e.to_string(),
            });
        }
    }
    out
}

fn fleet_diagnostics(fleet: &FleetSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let scalars = [
        ("account_id", &fleet.account_id),
        ("region", &fleet.region),
        ("instance_role", &fleet.instance_role),
        ("key_name", &fleet.key_name),
    ];
    for (field, value) in scalars {
        if value.trim().is_empty() {
            out.push(Diagnostic::error(field, "must not be empty"));
        }
    }
    for (field, list) in [
        ("subnet_ids", &fleet.subnet_ids),
        ("security_group_ids", &fleet.security_group_ids),
    ] {
        if list.is_empty() {
            out.push(Diagnostic::error(field, "must list at least one id"));
        }
        for (i, id) in list.iter().enumerate() {
            if id.trim().is_empty() {
                out.push(Diagnostic::error(
                    &format!("{field}[{i}]"),
                    "must not be empty",
                ));
            }
        }
    }
    // Keep field order stable regardless of which check fired first.
    out.sort_by_key(|d| {
        [
            "account_id",
            "region",
            "subnet_ids",
            "security_group_ids",
            "instance_role",
            "key_name",
        ]
        .iter()
        .position(|f| d.field.starts_with(f))
    });
    out
}

/// Check a parsed run for executability. An empty list means the run can go.
///
/// `task_count_hint` enables the over-provisioning warning; without a hint no
/// such warning is produced.
pub fn validate_run(
    config: &RunConfig,
    fleet: &FleetSpec,
    task_count_hint: Option<usize>,
) -> Vec<Diagnostic> {
    let mut out = config_diagnostics(config);
    out.extend(fleet_diagnostics(fleet));
    if config.monitor_period_s > config.visibility_timeout_s && config.visibility_timeout_s > 0 {
        out.push(Diagnostic::warn(
            "monitor_period_s",
            format!(
                "monitor period {}s exceeds visibility timeout {}s; the monitor may observe stale in-flight counts and downscale late",
                config.monitor_period_s, config.visibility_timeout_s
            ),
        ));
    }
    if let Some(tasks) = task_count_hint {
        let slots = u64::from(config.fleet_size) * u64::from(config.tasks_per_machine);
        if slots > tasks as u64 {
            out.push(Diagnostic::warn(
                "fleet_size",
                format!("{slots} agent slots for {tasks} tasks; some agents will idle"),
            ));
        }
    }
    out
}

fn sanitize(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Deterministic id for the `index`-th task: zero-padded ordinal, then the
/// task-level values in sorted order, joined by `-`.
pub fn task_id_for(index: usize, task: &Parameters) -> String {
    let mut values: Vec<String> = task.values().map(|v| v.to_string()).collect();
    values.sort();
    let mut id = format!("{index:06}");
    for v in values {
        id.push('-');
        id.push_str(&v);
    }
    let mut id = sanitize(&id);
    id.truncate(MAX_TASK_ID_LEN);
    id
}

/// Flatten a job file into one message per task, in input order.
pub fn expand_jobs(job: &JobSpec, config: &RunConfig) -> Result<Vec<TaskMessage>, SpecError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(job.tasks.len());
    for (index, task) in job.tasks.iter().enumerate() {
        let task_id = task_id_for(index, task);
        if !seen.insert(task_id.clone()) {
            return Err(SpecError::DuplicateTaskId(task_id));
        }
        let mut parameters = job.shared.clone();
        parameters.extend(task.iter().map(|(k, v)| (k.clone(), v.clone())));
        out.push(TaskMessage {
            output_prefix: format!("{}/{}", config.output_prefix, task_id),
            task_id,
            parameters,
        });
    }
    Ok(out)
}
