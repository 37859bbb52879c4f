//! At-least-once work queue with visibility timeouts and a dead-letter store.
//!
//! The state machine is plain data; callers provide mutual exclusion (the
//! simulation serializes on its event loop, the local backend holds a lock).
//!
//! A message is *visible* when its `visible_at` has passed, *in flight* while
//! a lease holds it invisible, and *dead* once its receive count reached the
//! limit. Dead messages are moved to the dead-letter list lazily, the next
//! time a lease would otherwise select them; until then [`Queue::counts`]
//! already reports them as dead so that the counts always partition the
//! undeleted messages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::specfiles::TaskMessage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue `{0}` already exists")]
    QueueAlreadyExists(String),
    #[error("no queue named `{0}`")]
    NoSuchQueue(String),
    #[error("queue `{0}` has been deleted")]
    QueueDeleted(String),
    #[error("receipt for message `{message_id}` is stale (expired or superseded)")]
    StaleReceipt { message_id: String },
    #[error("invalid queue setting `{field}`: must be positive")]
    InvalidSetting { field: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub message_id: String,
    pub token: String,
    pub leased_until: Timestamp,
    /// Which delivery of the message this lease belongs to, starting at 1.
    pub receive_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedMessage {
    pub message_id: String,
    pub body: TaskMessage,
    pub receive_count: u32,
    pub visible_at: Timestamp,
    pub current_receipt: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub visible: usize,
    pub in_flight: usize,
    pub dlq: usize,
    pub deleted: bool,
}

impl QueueCounts {
    /// Work that still needs an agent: visible plus in flight.
    pub fn demand(&self) -> usize {
        self.visible + self.in_flight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseEventKind {
    Enqueued,
    Leased,
    Extended,
    Acked,
    DeadLettered,
}

/// One entry in the queue's delivery history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseEvent {
    pub time: Timestamp,
    pub message_id: String,
    pub kind: LeaseEventKind,
    pub receive_count: u32,
    pub leased_until: Option<Timestamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Queue {
    name: String,
    visibility_timeout_s: u32,
    max_receive_count: u32,
    messages: BTreeMap<String, QueuedMessage>,
    /// (visible_at, message_id) for every live message.
    order: BTreeSet<(Timestamp, String)>,
    dead_letter: Vec<QueuedMessage>,
    deleted: bool,
    next_message: u64,
    next_token: u64,
    enqueued_total: u64,
    acked_total: u64,
    history: Vec<LeaseEvent>,
}

impl Queue {
    pub fn new(
        name: impl Into<String>,
        visibility_timeout_s: u32,
        max_receive_count: u32,
    ) -> Result<Self, QueueError> {
        if visibility_timeout_s == 0 {
            return Err(QueueError::InvalidSetting {
                field: "visibility_timeout_s",
            });
        }
        if max_receive_count == 0 {
            return Err(QueueError::InvalidSetting {
                field: "max_receive_count",
            });
        }
        Ok(Queue {
            name: name.into(),
            visibility_timeout_s,
            max_receive_count,
            messages: BTreeMap::new(),
            order: BTreeSet::new(),
            dead_letter: Vec::new(),
            deleted: false,
            next_message: 0,
            next_token: 0,
            enqueued_total: 0,
            acked_total: 0,
            history: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn visibility_timeout_s(&self) -> u32 {
        self.visibility_timeout_s
    }

    pub fn max_receive_count(&self) -> u32 {
        self.max_receive_count
    }

    pub fn is_deleted(&self) -> bool {
        self.deleted
    }

    pub fn enqueued_total(&self) -> u64 {
        self.enqueued_total
    }

    pub fn acked_total(&self) -> u64 {
        self.acked_total
    }

    pub fn history(&self) -> &[LeaseEvent] {
        &self.history
    }

    pub fn dead_letter(&self) -> &[QueuedMessage] {
        &self.dead_letter
    }

    fn ensure_live(&self) -> Result<(), QueueError> {
        if self.deleted {
            Err(QueueError::QueueDeleted(self.name.clone()))
        } else {
            Ok(())
        }
    }

    fn record(&mut self, time: Timestamp, m: &QueuedMessage, kind: LeaseEventKind) {
        let leased_until = matches!(kind, LeaseEventKind::Leased | LeaseEventKind::Extended)
            .then_some(m.visible_at);
        self.history.push(LeaseEvent {
            time,
            message_id: m.message_id.clone(),
            kind,
            receive_count: m.receive_count,
            leased_until,
        });
    }

    pub fn enqueue(&mut self, body: TaskMessage, now: Timestamp) -> Result<String, QueueError> {
        self.ensure_live()?;
        let message_id = format!("m-{:08}", self.next_message);
        self.next_message += 1;
        let msg = QueuedMessage {
            message_id: message_id.clone(),
            body,
            receive_count: 0,
            visible_at: now,
            current_receipt: None,
        };
        self.record(now, &msg, LeaseEventKind::Enqueued);
        self.order.insert((now, message_id.clone()));
        self.messages.insert(message_id.clone(), msg);
        self.enqueued_total += 1;
        Ok(message_id)
    }

    /// Lease the oldest visible message, dead-lettering any that exhausted
    /// their receives along the way.
    pub fn lease(&mut self, now: Timestamp) -> Result<Option<(TaskMessage, Receipt)>, QueueError> {
        self.ensure_live()?;
        loop {
            let Some((visible_at, id)) = self.order.first().cloned() else {
                return Ok(None);
            };
            if visible_at > now {
                return Ok(None);
            }
            self.order.pop_first();
            let mut msg = self.messages.remove(&id).expect("order index in sync");
            if msg.receive_count >= self.max_receive_count {
                msg.current_receipt = None;
                self.record(now, &msg, LeaseEventKind::DeadLettered);
                self.dead_letter.push(msg);
                continue;
            }
            msg.receive_count += 1;
            msg.visible_at = now.plus_secs(u64::from(self.visibility_timeout_s));
            let receipt = self.issue_receipt(&mut msg);
            self.record(now, &msg, LeaseEventKind::Leased);
            let body = msg.body.clone();
            self.order.insert((msg.visible_at, id.clone()));
            self.messages.insert(id, msg);
            return Ok(Some((body, receipt)));
        }
    }

    fn issue_receipt(&mut self, msg: &mut QueuedMessage) -> Receipt {
        let token = format!("rcpt-{}-{}", msg.message_id, self.next_token);
        self.next_token += 1;
        msg.current_receipt = Some(token.clone());
        Receipt {
            message_id: msg.message_id.clone(),
            token,
            leased_until: msg.visible_at,
            receive_count: msg.receive_count,
        }
    }

    /// Validate a receipt and return its message's id if it still holds the lease.
    fn held(&self, receipt: &Receipt, now: Timestamp) -> Result<(), QueueError> {
        let stale = || QueueError::StaleReceipt {
            message_id: receipt.message_id.clone(),
        };
        let msg = self.messages.get(&receipt.message_id).ok_or_else(stale)?;
        if msg.current_receipt.as_deref() != Some(receipt.token.as_str()) || msg.visible_at <= now {
            return Err(stale());
        }
        Ok(())
    }

    /// Keep a lease alive: the message stays invisible until `now + extra_s`.
    pub fn extend_lease(
        &mut self,
        receipt: &Receipt,
        extra_s: u32,
        now: Timestamp,
    ) -> Result<Receipt, QueueError> {
        self.ensure_live()?;
        self.held(receipt, now)?;
        let id = receipt.message_id.clone();
        let mut msg = self.messages.remove(&id).expect("held message exists");
        self.order.remove(&(msg.visible_at, id.clone()));
        msg.visible_at = now.plus_secs(u64::from(extra_s));
        let fresh = self.issue_receipt(&mut msg);
        self.record(now, &msg, LeaseEventKind::Extended);
        self.order.insert((msg.visible_at, id.clone()));
        self.messages.insert(id, msg);
        Ok(fresh)
    }

    /// Delete a message for good. A stale receipt leaves the message alone and
    /// tells the caller the work may run again elsewhere.
    pub fn ack(&mut self, receipt: &Receipt, now: Timestamp) -> Result<(), QueueError> {
        self.ensure_live()?;
        self.held(receipt, now)?;
        let msg = self
            .messages
            .remove(&receipt.message_id)
            .expect("held message exists");
        self.order.remove(&(msg.visible_at, msg.message_id.clone()));
        self.record(now, &msg, LeaseEventKind::Acked);
        self.acked_total += 1;
        Ok(())
    }

    pub fn counts(&self, now: Timestamp) -> QueueCounts {
        if self.deleted {
            return QueueCounts {
                deleted: true,
                ..QueueCounts::default()
            };
        }
        let mut counts = QueueCounts {
            dlq: self.dead_letter.len(),
            ..QueueCounts::default()
        };
        for msg in self.messages.values() {
            if msg.visible_at > now {
                counts.in_flight += 1;
            } else if msg.receive_count >= self.max_receive_count {
                counts.dlq += 1;
            } else {
                counts.visible += 1;
            }
        }
        counts
    }

    /// Dead messages including those not yet swept into the dead-letter list.
    pub fn dead_messages(&self, now: Timestamp) -> Vec<&QueuedMessage> {
        let mut out: Vec<&QueuedMessage> = self.dead_letter.iter().collect();
        out.extend(
            self.messages
                .values()
                .filter(|m| m.visible_at <= now && m.receive_count >= self.max_receive_count),
        );
        out
    }

    /// Delete the queue. Returns the dead-lettered task ids captured just
    /// before the contents are dropped; repeated calls return an empty list.
    pub fn purge_and_delete(&mut self, now: Timestamp) -> Vec<String> {
        if self.deleted {
            return Vec::new();
        }
        let dlq: Vec<String> = self
            .dead_messages(now)
            .into_iter()
            .map(|m| m.body.task_id.clone())
            .collect();
        self.messages.clear();
        self.order.clear();
        self.dead_letter.clear();
        self.deleted = true;
        dlq
    }
}

/// The named queues of one backend.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QueueService {
    queues: BTreeMap<String, Queue>,
}

impl QueueService {
    pub fn create_queue(
        &mut self,
        name: &str,
        visibility_timeout_s: u32,
        max_receive_count: u32,
    ) -> Result<&mut Queue, QueueError> {
        if self.queues.contains_key(name) {
            return Err(QueueError::QueueAlreadyExists(name.to_string()));
        }
        let queue = Queue::new(name, visibility_timeout_s, max_receive_count)?;
        Ok(self.queues.entry(name.to_string()).or_insert(queue))
    }

    pub fn get(&self, name: &str) -> Result<&Queue, QueueError> {
        self.queues
            .get(name)
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Queue, QueueError> {
        self.queues
            .get_mut(name)
            .ok_or_else(|| QueueError::NoSuchQueue(name.to_string()))
    }
}
