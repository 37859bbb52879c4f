//! Container placement: keep `tasks_per_machine` identical agents on every
//! running instance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{Instance, InstanceState};
use crate::specfiles::{MachineType, RunConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("a different task definition is already registered for `{0}`")]
    AlreadyRegistered(String),
    #[error("instance `{instance_id}` cannot fit another agent ({resource})")]
    InfeasiblePacking {
        instance_id: String,
        resource: &'static str,
    },
    #[error("no placement `{0}`")]
    NoSuchPlacement(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub taskdef_id: String,
    pub image_ref: String,
    pub cpu_units: u32,
    pub memory_mb: u32,
    pub environment: BTreeMap<String, String>,
}

impl TaskDefinition {
    pub fn from_config(config: &RunConfig) -> Self {
        let environment = BTreeMap::from([
            ("APP_NAME".to_string(), config.app_name.clone()),
            ("QUEUE_NAME".to_string(), config.queue_name()),
            ("OUTPUT_PREFIX".to_string(), config.output_prefix.clone()),
            ("LOG_GROUP".to_string(), config.log_group()),
        ]);
        TaskDefinition {
            taskdef_id: format!("{}_taskdef", config.app_name),
            image_ref: config.image_ref.clone(),
            cpu_units: config.task_cpu_units,
            memory_mb: config.task_memory_mb,
            environment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementState {
    Starting,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub placement_id: String,
    pub instance_id: String,
    pub taskdef_id: String,
    pub slot_index: u32,
    pub state: PlacementState,
}

impl Placement {
    pub fn is_live(&self) -> bool {
        self.state != PlacementState::Stopped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum PlacementAction {
    Start {
        placement_id: String,
        instance_id: String,
        slot_index: u32,
    },
    Stop {
        placement_id: String,
        instance_id: String,
        slot_index: u32,
    },
}

impl PlacementAction {
    fn sort_key(&self) -> (&str, u32, u8) {
        match self {
            PlacementAction::Stop {
                instance_id,
                slot_index,
                ..
            } => (instance_id, *slot_index, 0),
            PlacementAction::Start {
                instance_id,
                slot_index,
                ..
            } => (instance_id, *slot_index, 1),
        }
    }

    pub fn placement_id(&self) -> &str {
        match self {
            PlacementAction::Start { placement_id, .. } | PlacementAction::Stop { placement_id, .. } => {
                placement_id
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClusterState {
    taskdefs: BTreeMap<String, TaskDefinition>,
    /// Live placements only; stopped ones survive in the action log.
    placements: BTreeMap<String, Placement>,
    next_placement: u64,
    actions: Vec<PlacementAction>,
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register the run's agent shape. Re-registering an identical definition
    /// returns the existing one.
    pub fn register_task_definition(
        &mut self,
        config: &RunConfig,
    ) -> Result<TaskDefinition, PlacementError> {
        let def = TaskDefinition::from_config(config);
        match self.taskdefs.get(&config.app_name) {
            Some(existing) if *existing == def => Ok(existing.clone()),
            Some(_) => Err(PlacementError::AlreadyRegistered(config.app_name.clone())),
            None => {
                self.taskdefs.insert(config.app_name.clone(), def.clone());
                Ok(def)
            }
        }
    }

    pub fn task_definition(&self, app_name: &str) -> Option<&TaskDefinition> {
        self.taskdefs.get(app_name)
    }

    pub fn placements(&self) -> impl Iterator<Item = &Placement> {
        self.placements.values()
    }

    pub fn placement(&self, id: &str) -> Option<&Placement> {
        self.placements.get(id)
    }

    /// Every action ever emitted, in order.
    pub fn action_log(&self) -> &[PlacementAction] {
        &self.actions
    }

    pub fn live_placements(&self, instance_id: &str) -> usize {
        self.placements
            .values()
            .filter(|p| p.instance_id == instance_id && p.is_live())
            .count()
    }

    fn was_issued(&self, placement_id: &str) -> bool {
        placement_id
            .strip_prefix("p-")
            .and_then(|n| n.parse::<u64>().ok())
            .is_some_and(|n| n < self.next_placement)
    }

    /// A placement that has already stopped stays stopped.
    pub fn mark_running(&mut self, placement_id: &str) -> Result<(), PlacementError> {
        let issued = self.was_issued(placement_id);
        match self.placements.get_mut(placement_id) {
            Some(p) => {
                if p.state == PlacementState::Starting {
                    p.state = PlacementState::Running;
                }
                Ok(())
            }
            None if issued => Ok(()),
            None => Err(PlacementError::NoSuchPlacement(placement_id.to_string())),
        }
    }

    /// An agent exited on its own; the slot is refilled on the next reconcile.
    pub fn mark_stopped(&mut self, placement_id: &str) -> Result<(), PlacementError> {
        match self.placements.remove(placement_id) {
            Some(_) => Ok(()),
            None if self.was_issued(placement_id) => Ok(()),
            None => Err(PlacementError::NoSuchPlacement(placement_id.to_string())),
        }
    }

    /// Bring placements in line with the fleet: stop agents on instances that
    /// are no longer running and fill every empty slot on running ones.
    pub fn reconcile(
        &mut self,
        instances: &[&Instance],
        taskdef: &TaskDefinition,
        machine: &MachineType,
        tasks_per_machine: u32,
    ) -> Result<Vec<PlacementAction>, PlacementError> {
        let running: BTreeMap<&str, &Instance> = instances
            .iter()
            .filter(|i| i.state == InstanceState::Running)
            .map(|i| (i.instance_id.as_str(), *i))
            .collect();
        let cpu = u64::from(tasks_per_machine) * u64::from(taskdef.cpu_units);
        let mem = u64::from(tasks_per_machine) * u64::from(taskdef.memory_mb);
        if !running.is_empty() && (cpu > u64::from(machine.cpu_units) || mem > u64::from(machine.memory_mb)) {
            return Err(PlacementError::InfeasiblePacking {
                instance_id: running.keys().next().expect("non-empty").to_string(),
                resource: if cpu > u64::from(machine.cpu_units) {
                    "cpu_units"
                } else {
                    "memory_mb"
                },
            });
        }

        let mut actions = Vec::new();

        self.placements.retain(|_, p| {
            if running.contains_key(p.instance_id.as_str()) {
                return true;
            }
            actions.push(PlacementAction::Stop {
                placement_id: p.placement_id.clone(),
                instance_id: p.instance_id.clone(),
                slot_index: p.slot_index,
            });
            false
        });

        for instance_id in running.keys() {
            let filled: Vec<u32> = self
                .placements
                .values()
                .filter(|p| p.instance_id == *instance_id && p.is_live())
                .map(|p| p.slot_index)
                .collect();
            for slot in (0..tasks_per_machine).filter(|s| !filled.contains(s)) {
                let placement_id = format!("p-{:06}", self.next_placement);
                self.next_placement += 1;
                self.placements.insert(
                    placement_id.clone(),
                    Placement {
                        placement_id: placement_id.clone(),
                        instance_id: instance_id.to_string(),
                        taskdef_id: taskdef.taskdef_id.clone(),
                        slot_index: slot,
                        state: PlacementState::Starting,
                    },
                );
                actions.push(PlacementAction::Start {
                    placement_id,
                    instance_id: instance_id.to_string(),
                    slot_index: slot,
                });
            }
        }

        actions.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self.actions.extend(actions.iter().cloned());
        Ok(actions)
    }
}
