//! All control-plane state for one run, behind one lock.
//!
//! Both backends keep a [`World`]: the simulation holds it in memory, the
//! local backend round-trips it through a state file. Agents talk to it only
//! through [`AgentServices`].

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::fleet::{CostLedger, Fleet, FleetError, FleetService, MarketModel};
use crate::monitor::{FinalReport, MonitorState};
use crate::placement::{ClusterState, PlacementAction};
use crate::queue::{QueueCounts, QueueError, QueueService, Receipt};
use crate::specfiles::{FleetSpec, Parameters, RunConfig, TaskMessage};
use crate::telemetry::{LogLevel, Telemetry};
use crate::worker::{AgentReport, AgentServices, TaskResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: RunConfig,
    pub fleet_spec: FleetSpec,
    pub queues: QueueService,
    pub fleets: FleetService,
    pub cluster: ClusterState,
    pub telemetry: Telemetry,
    pub market: MarketModel,
    /// Results reported by every agent so far.
    pub tallies: AgentReport,
    /// Task id to number of executions that reported a result.
    pub executions: BTreeMap<String, u32>,
    pub cluster_started_at: Option<Timestamp>,
    pub monitor: MonitorState,
    pub final_report: Option<FinalReport>,
}

impl World {
    /// Create the queue and register the agent definition.
    pub fn setup(config: RunConfig, fleet_spec: FleetSpec, market: MarketModel) -> Result<World> {
        let mut queues = QueueService::default();
        queues.create_queue(
            &config.queue_name(),
            config.visibility_timeout_s,
            config.max_receive_count,
        )?;
        let mut cluster = ClusterState::new();
        cluster.register_task_definition(&config)?;
        Ok(World {
            monitor: MonitorState::for_config(&config, false),
            config,
            fleet_spec,
            queues,
            fleets: FleetService::default(),
            cluster,
            telemetry: Telemetry::new(),
            market,
            tallies: AgentReport::default(),
            executions: BTreeMap::new(),
            cluster_started_at: None,
            final_report: None,
        })
    }

    pub fn submit(&mut self, tasks: &[TaskMessage], now: Timestamp) -> Result<usize> {
        let queue = self.queues.get_mut(&self.config.queue_name())?;
        for task in tasks {
            queue.enqueue(task.clone(), now)?;
        }
        Ok(tasks.len())
    }

    pub fn start_cluster(&mut self, startup_delay_s: u64, now: Timestamp) -> Result<String> {
        let fleet = self
            .fleets
            .request_fleet(&self.config, &self.fleet_spec, startup_delay_s)?;
        let id = fleet.fleet_id().to_string();
        self.cluster_started_at = Some(now);
        Ok(id)
    }

    pub fn fleet(&self) -> Option<&Fleet> {
        self.fleets.get(&self.config.fleet_name())
    }

    pub fn fleet_mut(&mut self) -> Option<&mut Fleet> {
        let id = self.config.fleet_name();
        self.fleets.get_mut(&id)
    }

    pub fn queue_counts(&self, now: Timestamp) -> QueueCounts {
        self.queues
            .get(&self.config.queue_name())
            .map(|q| q.counts(now))
            .unwrap_or(QueueCounts {
                deleted: true,
                ..QueueCounts::default()
            })
    }

    pub fn ledger(&self, now: Timestamp) -> CostLedger {
        self.fleet().map(|f| f.accrue_cost(now)).unwrap_or_default()
    }

    /// Advance the fleet against the market, then bring placements in line
    /// with whatever is running. A cancelled fleet still reconciles, which
    /// stops every remaining agent.
    pub fn fleet_tick(&mut self, now: Timestamp) -> Result<Vec<PlacementAction>> {
        let fleet_id = self.config.fleet_name();
        let Some(fleet) = self.fleets.get_mut(&fleet_id) else {
            return Ok(Vec::new());
        };
        if !fleet.is_cancelled() {
            let cluster = &self.cluster;
            match fleet.tick(&mut self.market, now, &|id| cluster.live_placements(id)) {
                Ok(_) | Err(FleetError::FleetCancelled(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let instances: Vec<_> = fleet.instances().collect();
        let taskdef = self
            .cluster
            .task_definition(&self.config.app_name)
            .cloned()
            .ok_or_else(|| Error::NotSetUp(self.config.app_name.clone()))?;
        Ok(self.cluster.reconcile(
            &instances,
            &taskdef,
            &self.config.machine_type,
            self.config.tasks_per_machine,
        )?)
    }

    pub fn lease(&mut self, now: Timestamp) -> Result<Option<(TaskMessage, Receipt)>> {
        Ok(self.queues.get_mut(&self.config.queue_name())?.lease(now)?)
    }

    pub fn extend_lease(&mut self, receipt: &Receipt, extra_s: u32, now: Timestamp) -> Result<Receipt> {
        Ok(self
            .queues
            .get_mut(&self.config.queue_name())?
            .extend_lease(receipt, extra_s, now)?)
    }

    pub fn ack(&mut self, receipt: &Receipt, now: Timestamp) -> Result<()> {
        Ok(self.queues.get_mut(&self.config.queue_name())?.ack(receipt, now)?)
    }

    pub fn log(
        &mut self,
        stream_id: &str,
        tags: Option<&Parameters>,
        severity: LogLevel,
        line: &str,
        now: Timestamp,
    ) -> Result<()> {
        self.telemetry.append_log(stream_id, tags, severity, line, now)?;
        Ok(())
    }

    pub fn record(&mut self, result: &TaskResult, stale_ack: bool) {
        self.tallies.absorb(result, stale_ack);
        if result.status != crate::worker::TaskStatus::SkippedDone {
            *self.executions.entry(result.task_id.clone()).or_default() += 1;
        }
    }

    pub fn is_torn_down(&self) -> bool {
        self.final_report.is_some()
    }
}

/// A [`World`] shared between in-process agents.
#[derive(Debug)]
pub struct SharedWorld(Mutex<World>);

impl SharedWorld {
    pub fn new(world: World) -> Self {
        SharedWorld(Mutex::new(world))
    }

    pub fn lock(&self) -> MutexGuard<'_, World> {
        self.0.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn into_inner(self) -> World {
        self.0.into_inner().unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}

impl AgentServices for SharedWorld {
    fn lease(&self, now: Timestamp) -> Result<Option<(TaskMessage, Receipt)>> {
        self.lock().lease(now)
    }

    fn extend_lease(&self, receipt: &Receipt, extra_s: u32, now: Timestamp) -> Result<Receipt> {
        self.lock().extend_lease(receipt, extra_s, now)
    }

    fn ack(&self, receipt: &Receipt, now: Timestamp) -> Result<()> {
        self.lock().ack(receipt, now)
    }

    fn log(
        &self,
        stream_id: &str,
        tags: Option<&Parameters>,
        severity: LogLevel,
        line: &str,
        now: Timestamp,
    ) -> Result<()> {
        self.lock().log(stream_id, tags, severity, line, now)
    }

    fn record(&self, result: &TaskResult, stale_ack: bool) -> Result<()> {
        self.lock().record(result, stale_ack);
        Ok(())
    }
}

/// True if the error means the queue is gone for good.
pub fn queue_gone(err: &Error) -> bool {
    matches!(
        err,
        Error::Queue(QueueError::QueueDeleted(_) | QueueError::NoSuchQueue(_))
    )
}
