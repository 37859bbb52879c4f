//! Control plane for running perfectly parallel batch work on a fleet of
//! preemptible machines: a work queue with leases and a dead-letter policy, an
//! object store, a spot-style fleet with a cost ledger, slot placement, the
//! worker agent, telemetry, and a monitor that downscales and tears down.

pub mod clock;
pub mod error;
pub mod fleet;
pub mod local;
pub mod monitor;
pub mod objectstore;
pub mod placement;
pub mod queue;
pub mod sim;
pub mod specfiles;
pub mod telemetry;
pub mod worker;
pub mod world;

pub use error::{Error, Result};
