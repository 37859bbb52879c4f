//! Spot-fleet lifecycle, market model and cost ledger.
//!
//! A [`Fleet`] keeps a target number of single-type instances alive while the
//! market price stays at or under the bid. [`Fleet::tick`] reconciles in a fixed
//! order: market interruptions, then scale-down, then launches, then startup
//! completion. Billing is per second at the launch-time price, plus a flat
//! monitoring charge per machine-hour.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::specfiles::{FleetSpec, MachineType, RunConfig};

/// Monitoring overhead in USD per machine-hour.
pub const MONITORING_RATE_PER_MACHINE_HOUR: f64 = 0.0001;

pub const DEFAULT_STARTUP_DELAY_S: u64 = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FleetError {
    #[error("fleet `{0}` is already active")]
    FleetAlreadyActive(String),
    #[error("fleet `{0}` has been cancelled")]
    FleetCancelled(String),
    #[error("no fleet named `{0}`")]
    NoSuchFleet(String),
}

/// How the spot price moves over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PricePath {
    /// Always the base price.
    Constant,
    /// Mean-reverting walk: each step moves by `reversion` of the gap to the
    /// base price plus uniform noise of `volatility` x base.
    RandomWalk { volatility: f64, reversion: f64 },
    /// Explicit steps `(from_second, price)`; the base price applies before
    /// the first step.
    Schedule { steps: Vec<(u64, f64)> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketModel {
    pub seed: u64,
    pub base_price_per_hour: f64,
    /// Length of one constant-price interval, seconds.
    pub step_s: u64,
    pub path: PricePath,
    /// Per-instance probability of reclamation per hour, independent of price.
    pub interruption_hazard_per_hour: Option<f64>,
    #[serde(skip)]
    walk: Vec<f64>,
    #[serde(skip)]
    walk_rng: Option<ChaCha8Rng>,
}

impl MarketModel {
    pub fn constant(price_per_hour: f64) -> Self {
        Self::new(0, price_per_hour, 60, PricePath::Constant, None)
    }

    pub fn new(
        seed: u64,
        base_price_per_hour: f64,
        step_s: u64,
        path: PricePath,
        interruption_hazard_per_hour: Option<f64>,
    ) -> Self {
        MarketModel {
            seed,
            base_price_per_hour,
            step_s: step_s.max(1),
            path,
            interruption_hazard_per_hour,
            walk: Vec::new(),
            walk_rng: None,
        }
    }

    pub fn price(&mut self, now: Timestamp) -> f64 {
        let step = now.as_millis() / (self.step_s * 1000);
        match &self.path {
            PricePath::Constant => self.base_price_per_hour,
            PricePath::Schedule { steps } => {
                let secs = now.as_millis() / 1000;
                steps
                    .iter()
                    .take_while(|(from, _)| *from <= secs)
                    .last()
                    .map_or(self.base_price_per_hour, |&(_, p)| p)
            }
            PricePath::RandomWalk {
                volatility,
                reversion,
            } => {
                let (volatility, reversion) = (*volatility, *reversion);
                let base = self.base_price_per_hour;
                let rng = self
                    .walk_rng
                    .get_or_insert_with(|| ChaCha8Rng::seed_from_u64(self.seed));
                if self.walk.is_empty() {
                    self.walk.push(base);
                }
                while self.walk.len() as u64 <= step {
                    let prev = *self.walk.last().expect("walk starts non-empty");
                    let noise: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    let next = prev + reversion * (base - prev) + volatility * base * noise;
                    self.walk.push(next.max(0.0));
                }
                self.walk[step as usize]
            }
        }
    }

    /// Whether the hazard reclaims instance `serial` over the `dt_ms` leading
    /// up to `now`. Counter-based, so the answer does not depend on how many
    /// other draws happened before.
    pub fn hazard_hits(&self, serial: u64, dt_ms: u64, now: Timestamp) -> bool {
        let Some(rate) = self.interruption_hazard_per_hour else {
            return false;
        };
        if dt_ms == 0 || rate <= 0.0 {
            return false;
        }
        // Linear in dt keeps the draw free of platform libm differences.
        let p = (rate * dt_ms as f64 / 3_600_000.0).min(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6861_7a61_7264);
        rng.set_stream(serial);
        rng.set_word_pos(u128::from(now.as_millis()) * 2);
        rng.random::<f64>() < p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetState {
    Active,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetRequest {
    pub fleet_id: String,
    pub machine_type: MachineType,
    pub target_capacity: u32,
    pub max_price_per_hour: f64,
    pub state: FleetState,
    pub region: String,
    pub subnet_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Pending,
    Running,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    CapacityReduced,
    MarketInterrupted,
    FleetCancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub serial: u64,
    pub state: InstanceState,
    pub launch_time: Timestamp,
    pub ready_time: Option<Timestamp>,
    pub termination_time: Option<Timestamp>,
    pub price_per_hour: f64,
    pub termination_reason: Option<TerminationReason>,
}

impl Instance {
    pub fn is_alive(&self) -> bool {
        self.state != InstanceState::Terminated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Launched,
    Running,
    Terminated,
}

/// One instance state change, in the line-delimited export format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEvent {
    pub time: Timestamp,
    pub instance_id: String,
    pub transition: Transition,
    pub reason: Option<TerminationReason>,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub instance_id: String,
    pub seconds_billed: f64,
    pub price_per_hour: f64,
    pub compute_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
    pub machine_seconds: f64,
    pub compute_total: f64,
    pub monitoring_overhead: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fleet {
    request: FleetRequest,
    instances: BTreeMap<String, Instance>,
    events: Vec<FleetEvent>,
    startup_delay_s: u64,
    next_serial: u64,
    last_tick: Option<Timestamp>,
}

impl Fleet {
    pub fn new(config: &RunConfig, spec: &FleetSpec, startup_delay_s: u64) -> Self {
        Fleet {
            request: FleetRequest {
                fleet_id: config.fleet_name(),
                machine_type: config.machine_type.clone(),
                target_capacity: config.fleet_size,
                max_price_per_hour: config.max_price_per_hour,
                state: FleetState::Active,
                region: spec.region.clone(),
                subnet_ids: spec.subnet_ids.clone(),
            },
            instances: BTreeMap::new(),
            events: Vec::new(),
            startup_delay_s,
            next_serial: 1,
            last_tick: None,
        }
    }

    pub fn request(&self) -> &FleetRequest {
        &self.request
    }

    pub fn fleet_id(&self) -> &str {
        &self.request.fleet_id
    }

    pub fn is_cancelled(&self) -> bool {
        self.request.state == FleetState::Cancelled
    }

    pub fn target_capacity(&self) -> u32 {
        self.request.target_capacity
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn events(&self) -> &[FleetEvent] {
        &self.events
    }

    pub fn count(&self, state: InstanceState) -> usize {
        self.instances.values().filter(|i| i.state == state).count()
    }

    pub fn alive(&self) -> usize {
        self.instances.values().filter(|i| i.is_alive()).count()
    }

    fn ensure_active(&self) -> Result<(), FleetError> {
        if self.is_cancelled() {
            Err(FleetError::FleetCancelled(self.request.fleet_id.clone()))
        } else {
            Ok(())
        }
    }

    pub fn set_target_capacity(&mut self, n: u32) -> Result<(), FleetError> {
        self.ensure_active()?;
        self.request.target_capacity = n;
        Ok(())
    }

    fn terminate(&mut self, id: &str, reason: TerminationReason, now: Timestamp) -> FleetEvent {
        let inst = self.instances.get_mut(id).expect("terminating a known instance");
        inst.state = InstanceState::Terminated;
        inst.termination_time = Some(now);
        inst.termination_reason = Some(reason);
        let event = FleetEvent {
            time: now,
            instance_id: id.to_string(),
            transition: Transition::Terminated,
            reason: Some(reason),
            price: inst.price_per_hour,
        };
        self.events.push(event.clone());
        event
    }

    /// Reconcile against the market at `now`.
    ///
    /// `live_placements` reports how many agent slots are attached to an
    /// instance; scale-down removes the emptiest instances first.
    pub fn tick(
        &mut self,
        market: &mut MarketModel,
        now: Timestamp,
        live_placements: &dyn Fn(&str) -> usize,
    ) -> Result<Vec<FleetEvent>, FleetError> {
        self.ensure_active()?;
        let dt_ms = self.last_tick.map_or(0, |last| now.millis_since(last));
        self.last_tick = Some(now);
        let price = market.price(now);
        let bid = self.request.max_price_per_hour;
        let mut out = Vec::new();

        let alive: Vec<(String, u64)> = self
            .instances
            .values()
            .filter(|i| i.is_alive())
            .map(|i| (i.instance_id.clone(), i.serial))
            .collect();
        if price > bid {
            for (id, _) in &alive {
                out.push(self.terminate(id, TerminationReason::MarketInterrupted, now));
            }
        } else {
            for (id, serial) in &alive {
                if market.hazard_hits(*serial, dt_ms, now) {
                    out.push(self.terminate(id, TerminationReason::MarketInterrupted, now));
                }
            }
        }

        let target = self.request.target_capacity as usize;
        let mut alive: Vec<(usize, String)> = self
            .instances
            .values()
            .filter(|i| i.is_alive())
            .map(|i| (live_placements(&i.instance_id), i.instance_id.clone()))
            .collect();
        if alive.len() > target {
            alive.sort();
            let excess = alive.len() - target;
            for (_, id) in alive.drain(..excess) {
                out.push(self.terminate(&id, TerminationReason::CapacityReduced, now));
            }
        }

        if alive.len() < target && price <= bid {
            for _ in alive.len()..target {
                let serial = self.next_serial;
                self.next_serial += 1;
                let id = format!("i-{serial:06}");
                self.instances.insert(
                    id.clone(),
                    Instance {
                        instance_id: id.clone(),
                        serial,
                        state: InstanceState::Pending,
                        launch_time: now,
                        ready_time: None,
                        termination_time: None,
                        price_per_hour: price,
                        termination_reason: None,
                    },
                );
                let event = FleetEvent {
                    time: now,
                    instance_id: id,
                    transition: Transition::Launched,
                    reason: None,
                    price,
                };
                self.events.push(event.clone());
                out.push(event);
            }
        }

        let delay_ms = self.startup_delay_s * 1000;
        for inst in self.instances.values_mut() {
            if inst.state == InstanceState::Pending && inst.launch_time.plus_millis(delay_ms) <= now {
                inst.state = InstanceState::Running;
                inst.ready_time = Some(now);
                let event = FleetEvent {
                    time: now,
                    instance_id: inst.instance_id.clone(),
                    transition: Transition::Running,
                    reason: None,
                    price: inst.price_per_hour,
                };
                self.events.push(event.clone());
                out.push(event);
            }
        }
        Ok(out)
    }

    /// Cancel the request and terminate everything. Idempotent.
    pub fn cancel(&mut self, now: Timestamp) -> Vec<FleetEvent> {
        if self.is_cancelled() {
            return Vec::new();
        }
        self.request.state = FleetState::Cancelled;
        let alive: Vec<String> = self
            .instances
            .values()
            .filter(|i| i.is_alive())
            .map(|i| i.instance_id.clone())
            .collect();
        alive
            .iter()
            .map(|id| self.terminate(id, TerminationReason::FleetCancelled, now))
            .collect()
    }

    pub fn accrue_cost(&self, now: Timestamp) -> CostLedger {
        let mut ledger = CostLedger::default();
        for inst in self.instances.values() {
            let end = inst.termination_time.map_or(now, |t| t.min(now));
            let seconds = end.millis_since(inst.launch_time) as f64 / 1000.0;
            let compute_cost = seconds / 3600.0 * inst.price_per_hour;
            ledger.machine_seconds += seconds;
            ledger.compute_total += compute_cost;
            ledger.entries.push(CostEntry {
                instance_id: inst.instance_id.clone(),
                seconds_billed: seconds,
                price_per_hour: inst.price_per_hour,
                compute_cost,
            });
        }
        ledger.monitoring_overhead =
            ledger.machine_seconds / 3600.0 * MONITORING_RATE_PER_MACHINE_HOUR;
        ledger.total = ledger.compute_total + ledger.monitoring_overhead;
        ledger
    }

    /// The event log as line-delimited JSON.
    pub fn export_events(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

/// Fleets keyed by id; one active fleet per run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FleetService {
    fleets: BTreeMap<String, Fleet>,
}

impl FleetService {
    pub fn request_fleet(
        &mut self,
        config: &RunConfig,
        spec: &FleetSpec,
        startup_delay_s: u64,
    ) -> Result<&mut Fleet, FleetError> {
        let id = config.fleet_name();
        if self.fleets.get(&id).is_some_and(|f| !f.is_cancelled()) {
            return Err(FleetError::FleetAlreadyActive(id));
        }
        let fleet = Fleet::new(config, spec, startup_delay_s);
        self.fleets.insert(id.clone(), fleet);
        Ok(self.fleets.get_mut(&id).expect("just inserted"))
    }

    pub fn get(&self, id: &str) -> Option<&Fleet> {
        self.fleets.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Fleet> {
        self.fleets.get_mut(id)
    }
}
