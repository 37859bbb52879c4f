//! Deterministic discrete-event simulation of a whole run.
//!
//! One thread, one virtual clock, one event queue ordered by
//! `(time, sequence number)`. Fleet ticks advance the market and reconcile
//! placements, spawning or killing agents; agents wake at the instants they
//! ask for; the monitor ticks every `monitor_period_s`. Given the same inputs
//! and seed, every run produces the same world byte for byte.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp, VirtualClock};
use crate::error::Result;
use crate::fleet::{MarketModel, TerminationReason, DEFAULT_STARTUP_DELAY_S};
use crate::monitor::{self, FinalReport, MonitorPhase};
use crate::objectstore::ObjectStore;
use crate::placement::PlacementAction;
use crate::specfiles::{FleetSpec, RunConfig, TaskMessage};
use crate::worker::{Agent, AgentSettings, Executor, SimulatedExecutor, Wake};
use crate::world::{SharedWorld, World};

pub const DEFAULT_FLEET_TICK_S: u64 = 10;
pub const DEFAULT_HORIZON_S: u64 = 30 * 24 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub startup_delay_s: u64,
    pub fleet_tick_s: u64,
    pub executor: SimulatedExecutor,
    /// Simulated time after which teardown is forced.
    pub horizon_s: u64,
    pub export_dir: Option<PathBuf>,
    pub delete_logs: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            startup_delay_s: DEFAULT_STARTUP_DELAY_S,
            fleet_tick_s: DEFAULT_FLEET_TICK_S,
            executor: SimulatedExecutor::default(),
            horizon_s: DEFAULT_HORIZON_S,
            export_dir: None,
            delete_logs: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub events: u64,
    pub deliveries: u64,
    pub agents_spawned: u64,
    /// Instances reclaimed by the market while at least one agent on them
    /// was executing a task.
    pub interrupted_mid_task: BTreeSet<String>,
    /// Last instant the queue went from some demand to none.
    pub drained_at: Option<Timestamp>,
    pub torn_down_at: Option<Timestamp>,
    pub horizon_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    FleetTick,
    MonitorTick,
    AgentWake(String),
}

/// A run in progress.
pub struct Simulation<'a> {
    world: SharedWorld,
    store: &'a dyn ObjectStore,
    options: SimOptions,
    clock: VirtualClock,
    events: BinaryHeap<Reverse<(Timestamp, u64, EventKind)>>,
    seq: u64,
    agents: BTreeMap<String, Agent>,
    stats: SimStats,
    had_demand: bool,
}

impl<'a> Simulation<'a> {
    /// Resume from `world` at virtual time `now`. Requests the fleet if the
    /// cluster has not been started yet.
    pub fn from_world(mut world: World, store: &'a dyn ObjectStore, options: SimOptions, now: Timestamp) -> Result<Self> {
        if world.fleet().is_none() {
            world.start_cluster(options.startup_delay_s, now)?;
        }
        world.monitor.delete_logs |= options.delete_logs;
        let period = u64::from(world.monitor.period_s);
        let had_demand = world.queue_counts(now).demand() > 0;
        let mut sim = Simulation {
            world: SharedWorld::new(world),
            store,
            options,
            clock: VirtualClock::new(now),
            events: BinaryHeap::new(),
            seq: 0,
            agents: BTreeMap::new(),
            stats: SimStats::default(),
            had_demand,
        };
        sim.schedule(now, EventKind::FleetTick);
        sim.schedule(now.plus_secs(period), EventKind::MonitorTick);
        Ok(sim)
    }

    /// Set up a fresh run, submit `tasks` and start the cluster at time zero.
    pub fn new(
        config: RunConfig,
        fleet_spec: FleetSpec,
        tasks: &[TaskMessage],
        market: MarketModel,
        store: &'a dyn ObjectStore,
        options: SimOptions,
    ) -> Result<Self> {
        let mut world = World::setup(config, fleet_spec, market)?;
        world.submit(tasks, Timestamp::ZERO)?;
        Self::from_world(world, store, options, Timestamp::ZERO)
    }

    fn schedule(&mut self, at: Timestamp, kind: EventKind) {
        self.events.push(Reverse((at, self.seq, kind)));
        self.seq += 1;
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn world(&self) -> std::sync::MutexGuard<'_, World> {
        self.world.lock()
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn is_finished(&self) -> bool {
        self.world.lock().monitor.phase == MonitorPhase::TornDown && self.agents.is_empty()
    }

    /// Process every event up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) -> Result<()> {
        while let Some(Reverse((at, _, _))) = self.events.peek() {
            if *at > until || self.is_finished() {
                break;
            }
            let Reverse((at, _, kind)) = self.events.pop().expect("peeked");
            self.clock.advance_to(at);
            self.stats.events += 1;
            self.handle(at, kind)?;
        }
        if !self.is_finished() {
            self.clock.advance_to(until);
        }
        Ok(())
    }

    /// Run to teardown and return the final report.
    pub fn run(&mut self) -> Result<FinalReport> {
        let horizon = Timestamp::from_secs(self.options.horizon_s);
        self.run_until(horizon)?;
        if !self.is_finished() {
            self.stats.horizon_hit = true;
            let now = self.clock.now();
            {
                let mut world = self.world.lock();
                monitor::teardown(&mut world, now, self.options.export_dir.as_deref())?;
            }
            self.stats.torn_down_at = Some(now);
            self.fleet_tick(now)?;
        }
        Ok(self
            .world
            .lock()
            .final_report
            .clone()
            .expect("finished runs have a report"))
    }

    pub fn into_parts(self) -> (World, SimStats, Timestamp) {
        let now = self.clock.now();
        (self.world.into_inner(), self.stats, now)
    }

    fn handle(&mut self, now: Timestamp, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::FleetTick => {
                self.fleet_tick(now)?;
                if !self.world.lock().is_torn_down() {
                    self.schedule(now.plus_secs(self.options.fleet_tick_s.max(1)), EventKind::FleetTick);
                }
            }
            EventKind::MonitorTick => {
                let torn_down = {
                    let mut world = self.world.lock();
                    monitor::monitor_tick(&mut world, now, self.options.export_dir.as_deref())?;
                    world.is_torn_down()
                };
                if torn_down {
                    self.stats.torn_down_at = Some(now);
                    self.fleet_tick(now)?;
                } else {
                    let period = u64::from(self.world.lock().monitor.period_s);
                    self.schedule(now.plus_secs(period), EventKind::MonitorTick);
                }
            }
            EventKind::AgentWake(placement_id) => self.wake_agent(&placement_id, now)?,
        }
        Ok(())
    }

    fn fleet_tick(&mut self, now: Timestamp) -> Result<()> {
        let actions = self.world.lock().fleet_tick(now)?;
        for action in actions {
            match action {
                PlacementAction::Stop {
                    placement_id,
                    instance_id,
                    ..
                } => {
                    if let Some(agent) = self.agents.remove(&placement_id) {
                        let reclaimed = self
                            .world
                            .lock()
                            .fleet()
                            .and_then(|f| f.instance(&instance_id))
                            .and_then(|i| i.termination_reason)
                            == Some(TerminationReason::MarketInterrupted);
                        if agent.is_busy() && reclaimed {
                            self.stats.interrupted_mid_task.insert(instance_id);
                        }
                    }
                }
                PlacementAction::Start {
                    placement_id,
                    instance_id,
                    ..
                } => {
                    let config = {
                        let mut world = self.world.lock();
                        world.cluster.mark_running(&placement_id)?;
                        world.config.clone()
                    };
                    let settings = AgentSettings::for_config(&config);
                    let agent = Agent::new(
                        placement_id.clone(),
                        instance_id,
                        config,
                        Executor::Simulated(self.options.executor.clone()),
                        settings,
                    );
                    self.agents.insert(placement_id.clone(), agent);
                    self.stats.agents_spawned += 1;
                    self.schedule(now, EventKind::AgentWake(placement_id));
                }
            }
        }
        Ok(())
    }

    fn wake_agent(&mut self, placement_id: &str, now: Timestamp) -> Result<()> {
        let Some(agent) = self.agents.get_mut(placement_id) else {
            return Ok(());
        };
        let was_busy = agent.is_busy();
        let wake = agent.step(&self.world, self.store, &self.clock);
        if !was_busy && agent.is_busy() {
            self.stats.deliveries += 1;
        }
        match wake {
            Wake::At(t) => self.schedule(t.max(now), EventKind::AgentWake(placement_id.to_string())),
            Wake::Exit => {
                self.agents.remove(placement_id);
                self.world.lock().cluster.mark_stopped(placement_id)?;
            }
        }
        let demand = self.world.lock().queue_counts(now).demand();
        if demand == 0 && self.had_demand {
            self.stats.drained_at = Some(now);
        }
        self.had_demand = demand > 0;
        Ok(())
    }
}

/// Convenience: run a fresh simulation to completion.
pub fn simulate(
    config: RunConfig,
    fleet_spec: FleetSpec,
    tasks: &[TaskMessage],
    market: MarketModel,
    store: &dyn ObjectStore,
    options: SimOptions,
) -> Result<(FinalReport, World, SimStats)> {
    let mut sim = Simulation::new(config, fleet_spec, tasks, market, store, options)?;
    let report = sim.run()?;
    let (world, stats, _) = sim.into_parts();
    Ok((report, world, stats))
}
