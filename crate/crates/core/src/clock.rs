//! Time for both backends.
//!
//! All control-plane state is stamped with [`Timestamp`], an integer count of
//! milliseconds. Under the simulation backend it counts from the start of the
//! run; under the local backend it counts from the Unix epoch.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Milliseconds on the backend's clock.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        self.plus_millis(secs.saturating_mul(1000))
    }

    /// Milliseconds from `earlier` to `self`, zero if `earlier` is later.
    pub fn millis_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

/// A source of time that an agent can also block on.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Block until `deadline` or until `stop` is raised, whichever comes first.
    fn sleep_until(&self, deadline: Timestamp, stop: &AtomicBool);
}

/// Wall clock in epoch milliseconds.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        let elapsed = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or(Duration::ZERO);
        Timestamp(elapsed.as_millis() as u64)
    }

    fn sleep_until(&self, deadline: Timestamp, stop: &AtomicBool) {
        const SLICE: Duration = Duration::from_millis(50);
        loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            let now = self.now();
            if now >= deadline {
                return;
            }
            let remaining = Duration::from_millis(deadline.millis_since(now));
            std::thread::sleep(remaining.min(SLICE));
        }
    }
}

/// A clock that only moves when someone sleeps on it.
///
/// Suitable for driving a single agent loop deterministically in tests; the
/// multi-agent simulation uses its own event queue instead.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now_ms: AtomicU64,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now_ms: AtomicU64::new(start.0),
        }
    }

    pub fn advance_to(&self, t: Timestamp) {
        self.now_ms.fetch_max(t.0, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now_ms.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, deadline: Timestamp, stop: &AtomicBool) {
        if !stop.load(Ordering::SeqCst) {
            self.advance_to(deadline);
        }
    }
}
