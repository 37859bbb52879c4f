use std::io;

use thiserror::Error;

use crate::fleet::FleetError;
use crate::objectstore::StoreError;
use crate::placement::PlacementError;
use crate::queue::QueueError;
use crate::specfiles::SpecError;
use crate::telemetry::TelemetryError;

/// Errors crossing backend boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("state file is corrupt: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("run is not set up: {0}")]
    NotSetUp(String),
    #[error("another monitor holds the lock for `{0}`")]
    MonitorLocked(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
