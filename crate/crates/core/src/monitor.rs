//! Downscaling and teardown.
//!
//! Each tick looks at demand (visible plus in-flight messages), lowers the
//! fleet's target to what that demand can use, and after enough consecutive
//! idle ticks exports telemetry and deletes everything the run created.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::Result;
use crate::fleet::{CostLedger, FleetEvent, InstanceState, TerminationReason};
use crate::placement::PlacementAction;
use crate::specfiles::RunConfig;
use crate::telemetry::{self, ExportManifest};
use crate::worker::AgentReport;
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorPhase {
    Watching,
    Draining,
    TornDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorState {
    pub period_s: u32,
    pub hysteresis_ticks: u32,
    pub consecutive_idle: u32,
    pub phase: MonitorPhase,
    pub delete_logs: bool,
}

impl MonitorState {
    pub fn for_config(config: &RunConfig, delete_logs: bool) -> Self {
        MonitorState {
            period_s: config.monitor_period_s.max(1),
            hysteresis_ticks: config.teardown_hysteresis_ticks.max(1),
            consecutive_idle: 0,
            phase: MonitorPhase::Watching,
            delete_logs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum MonitorAction {
    SetTargetCapacity { from: u32, to: u32 },
    ExportTelemetry { files: usize },
    CancelFleet { terminated: usize },
    DeleteQueue { dead_lettered: usize },
    DeleteLogs { streams: usize },
    FinalLedger { total: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub cluster_started_at: Option<Timestamp>,
    pub torn_down_at: Timestamp,
    pub wall_seconds: f64,
}

/// What a finished run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub app_name: String,
    pub tasks: AgentReport,
    pub dlq_task_ids: Vec<String>,
    pub ledger: CostLedger,
    pub timings: Timings,
    pub instances_launched: usize,
    pub instances_interrupted: usize,
    pub fleet_events: Vec<FleetEvent>,
    pub placement_actions: Vec<PlacementAction>,
}

impl FinalReport {
    /// Exit status for the monitor command: clean iff nothing failed and
    /// nothing was dead-lettered.
    pub fn is_clean(&self) -> bool {
        self.tasks.failed == 0 && self.dlq_task_ids.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut text = crate::specfiles::to_canonical_json(self);
        text.push('\n');
        text
    }
}

/// Demand that the fleet's slots can serve: `ceil(demand / tasks_per_machine)`,
/// capped at the configured fleet size.
pub fn desired_capacity(demand: usize, tasks_per_machine: u32, fleet_size: u32) -> u32 {
    let per = tasks_per_machine.max(1) as usize;
    demand.div_ceil(per).min(fleet_size as usize) as u32
}

/// One monitor observation. After teardown this is a no-op.
pub fn monitor_tick(world: &mut World, now: Timestamp, export_dir: Option<&Path>) -> Result<Vec<MonitorAction>> {
    if world.monitor.phase == MonitorPhase::TornDown {
        return Ok(Vec::new());
    }
    let mut actions = Vec::new();
    let counts = world.queue_counts(now);
    let demand = counts.demand();

    let fleet_size = world.config.fleet_size;
    let tpm = world.config.tasks_per_machine;
    if let Some(fleet) = world.fleet_mut() {
        if !fleet.is_cancelled() {
            let current = fleet.target_capacity();
            let desired = desired_capacity(demand, tpm, fleet_size);
            if desired < current {
                fleet.set_target_capacity(desired)?;
                actions.push(MonitorAction::SetTargetCapacity {
                    from: current,
                    to: desired,
                });
                world.monitor.phase = MonitorPhase::Draining;
            }
        }
    }

    if demand == 0 {
        world.monitor.consecutive_idle += 1;
        world.monitor.phase = MonitorPhase::Draining;
    } else {
        world.monitor.consecutive_idle = 0;
    }

    put_metrics(world, now)?;

    if world.monitor.consecutive_idle >= world.monitor.hysteresis_ticks {
        actions.extend(teardown(world, now, export_dir)?);
    }
    Ok(actions)
}

fn put_metrics(world: &mut World, now: Timestamp) -> Result<()> {
    let counts = world.queue_counts(now);
    let (running, target) = world.fleet().map_or((0, 0), |f| {
        (f.count(InstanceState::Running), f.target_capacity())
    });
    let cost = world.ledger(now).total;
    let tel = &mut world.telemetry;
    tel.put_metric(telemetry::QUEUE_VISIBLE, counts.visible as f64, now)?;
    tel.put_metric(telemetry::QUEUE_IN_FLIGHT, counts.in_flight as f64, now)?;
    tel.put_metric(telemetry::QUEUE_DLQ, counts.dlq as f64, now)?;
    tel.put_metric(telemetry::FLEET_RUNNING, running as f64, now)?;
    tel.put_metric(telemetry::FLEET_TARGET, f64::from(target), now)?;
    tel.put_metric(telemetry::COST_TOTAL, cost, now)?;
    Ok(())
}

/// Export, cancel, purge, optionally drop logs, and freeze the report.
/// Idempotent: a torn-down world is left alone.
pub fn teardown(world: &mut World, now: Timestamp, export_dir: Option<&Path>) -> Result<Vec<MonitorAction>> {
    if world.monitor.phase == MonitorPhase::TornDown {
        return Ok(Vec::new());
    }
    let mut actions = Vec::new();
    if let Some(dir) = export_dir {
        let manifest: ExportManifest = world.telemetry.export(dir)?;
        actions.push(MonitorAction::ExportTelemetry {
            files: manifest.files.len(),
        });
    }
    if let Some(fleet) = world.fleet_mut() {
        let terminated = fleet.cancel(now).len();
        actions.push(MonitorAction::CancelFleet { terminated });
    }
    let mut dlq_task_ids = match world.queues.get_mut(&world.config.queue_name()) {
        Ok(queue) => queue.purge_and_delete(now),
        Err(_) => Vec::new(),
    };
    dlq_task_ids.sort();
    actions.push(MonitorAction::DeleteQueue {
        dead_lettered: dlq_task_ids.len(),
    });
    if world.monitor.delete_logs {
        let streams = world.telemetry.stream_count();
        world.telemetry.clear_logs();
        actions.push(MonitorAction::DeleteLogs { streams });
    }
    let ledger = world.ledger(now);
    actions.push(MonitorAction::FinalLedger { total: ledger.total });

    let (launched, interrupted) = world.fleet().map_or((0, 0), |f| {
        let launched = f.instances().count();
        let interrupted = f
            .instances()
            .filter(|i| i.termination_reason == Some(TerminationReason::MarketInterrupted))
            .count();
        (launched, interrupted)
    });
    let started = world.cluster_started_at;
    world.final_report = Some(FinalReport {
        app_name: world.config.app_name.clone(),
        tasks: world.tallies,
        dlq_task_ids,
        ledger,
        timings: Timings {
            cluster_started_at: started,
            torn_down_at: now,
            wall_seconds: started.map_or(0.0, |s| now.millis_since(s) as f64 / 1000.0),
        },
        instances_launched: launched,
        instances_interrupted: interrupted,
        fleet_events: world.fleet().map(|f| f.events().to_vec()).unwrap_or_default(),
        placement_actions: world.cluster.action_log().to_vec(),
    });
    world.monitor.phase = MonitorPhase::TornDown;
    Ok(actions)
}
