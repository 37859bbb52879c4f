//! The queue against a deliberately naive list-based model.

use ds_core::clock::Timestamp;
use ds_core::queue::{Queue, QueueCounts, Receipt};
use ds_core::specfiles::{Parameters, TaskMessage};
use proptest::prelude::*;

#[derive(Debug, Clone, PartialEq)]
enum Fate {
    Live,
    Acked,
    Dead,
}

#[derive(Debug, Clone)]
struct Msg {
    id: String,
    visible_at: u64,
    receives: u32,
    generation: u64,
    fate: Fate,
}

/// Linear scans only; no ordering index, no lazy sweep bookkeeping.
struct Naive {
    vt_ms: u64,
    max_receives: u32,
    msgs: Vec<Msg>,
}

impl Naive {
    fn enqueue(&mut self, now: u64) -> String {
        let id = format!("m-{:08}", self.msgs.len());
        self.msgs.push(Msg {
            id: id.clone(),
            visible_at: now,
            receives: 0,
            generation: 0,
            fate: Fate::Live,
        });
        id
    }

    fn lease(&mut self, now: u64) -> Option<(String, u64)> {
        loop {
            let pick = self
                .msgs
                .iter_mut()
                .filter(|m| m.fate == Fate::Live && m.visible_at <= now)
                .min_by(|a, b| (a.visible_at, &a.id).cmp(&(b.visible_at, &b.id)))?;
            if pick.receives >= self.max_receives {
                pick.fate = Fate::Dead;
                continue;
            }
            pick.receives += 1;
            pick.visible_at = now + self.vt_ms;
            pick.generation += 1;
            return Some((pick.id.clone(), pick.generation));
        }
    }

    fn holder(&mut self, id: &str, generation: u64, now: u64) -> Option<&mut Msg> {
        self.msgs
            .iter_mut()
            .find(|m| m.id == id)
            .filter(|m| m.fate == Fate::Live && m.generation == generation && m.visible_at > now)
    }

    fn ack(&mut self, id: &str, generation: u64, now: u64) -> bool {
        match self.holder(id, generation, now) {
            Some(m) => {
                m.fate = Fate::Acked;
                true
            }
            None => false,
        }
    }

    fn extend(&mut self, id: &str, generation: u64, extra_ms: u64, now: u64) -> Option<u64> {
        let m = self.holder(id, generation, now)?;
        m.visible_at = now + extra_ms;
        m.generation += 1;
        Some(m.generation)
    }

    fn counts(&self, now: u64) -> QueueCounts {
        let mut c = QueueCounts::default();
        for m in &self.msgs {
            match m.fate {
                Fate::Acked => {}
                Fate::Dead => c.dlq += 1,
                Fate::Live if m.visible_at > now => c.in_flight += 1,
                Fate::Live if m.receives >= self.max_receives => c.dlq += 1,
                Fate::Live => c.visible += 1,
            }
        }
        c
    }

    fn acked(&self) -> usize {
        self.msgs.iter().filter(|m| m.fate == Fate::Acked).count()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Enqueue,
    Lease,
    Ack(usize),
    Extend(usize, u32),
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Enqueue),
        4 => Just(Op::Lease),
        2 => any::<usize>().prop_map(Op::Ack),
        1 => (any::<usize>(), 1u32..20).prop_map(|(i, s)| Op::Extend(i, s)),
        3 => (0u64..15_000).prop_map(Op::Advance),
    ]
}

fn body(n: usize) -> TaskMessage {
    TaskMessage {
        task_id: format!("t{n}"),
        parameters: Parameters::new(),
        output_prefix: format!("out/t{n}"),
    }
}

fn run(ops: &[Op], vt_s: u32, max_receives: u32) -> Result<(), TestCaseError> {
    let mut queue = Queue::new("q", vt_s, max_receives).unwrap();
    let mut naive = Naive {
        vt_ms: u64::from(vt_s) * 1000,
        max_receives,
        msgs: Vec::new(),
    };
    let mut now = 0u64;
    // Receipts handed out so far, valid or not, with the model's view of them.
    let mut receipts: Vec<(Receipt, String, u64)> = Vec::new();
    for op in ops {
        let t = Timestamp(now);
        match op {
            Op::Enqueue => {
                let id = queue.enqueue(body(naive.msgs.len()), t).unwrap();
                prop_assert_eq!(id, naive.enqueue(now));
            }
            Op::Lease => {
                let got = queue.lease(t).unwrap();
                let want = naive.lease(now);
                prop_assert_eq!(got.as_ref().map(|(_, r)| r.message_id.clone()), want.as_ref().map(|w| w.0.clone()));
                if let (Some((msg, r)), Some((id, generation))) = (got, want) {
                    prop_assert_eq!(&msg.task_id, &format!("t{}", id[2..].parse::<usize>().unwrap()));
                    receipts.push((r, id, generation));
                }
            }
            Op::Ack(i) if !receipts.is_empty() => {
                let (r, id, generation) = &receipts[i % receipts.len()];
                let ok = queue.ack(r, t).is_ok();
                prop_assert_eq!(ok, naive.ack(id, *generation, now));
            }
            Op::Extend(i, s) if !receipts.is_empty() => {
                let (r, id, generation) = receipts[i % receipts.len()].clone();
                let got = queue.extend_lease(&r, *s, t);
                let want = naive.extend(&id, generation, u64::from(*s) * 1000, now);
                prop_assert_eq!(got.is_ok(), want.is_some());
                if let (Ok(fresh), Some(g)) = (got, want) {
                    receipts.push((fresh, id, g));
                }
            }
            Op::Advance(ms) => now += ms,
            Op::Ack(_) | Op::Extend(..) => {}
        }
        let t = Timestamp(now);
        let counts = queue.counts(t);
        prop_assert_eq!(counts, naive.counts(now));
        // Nothing is ever lost.
        prop_assert_eq!(
            counts.visible + counts.in_flight + counts.dlq + queue.acked_total() as usize,
            queue.enqueued_total() as usize
        );
        prop_assert_eq!(queue.acked_total() as usize, naive.acked());
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn queue_matches_naive_model(
        ops in prop::collection::vec(op(), 1..300),
        vt in 1u32..30,
        max_receives in 1u32..4,
    ) {
        run(&ops, vt, max_receives)?;
    }
}

#[test]
fn purge_returns_every_dead_task() {
    let mut q = Queue::new("q", 5, 1).unwrap();
    for n in 0..4 {
        q.enqueue(body(n), Timestamp(0)).unwrap();
    }
    let (_, r) = q.lease(Timestamp(0)).unwrap().unwrap();
    q.ack(&r, Timestamp(1)).unwrap();
    for _ in 0..3 {
        q.lease(Timestamp(0)).unwrap().unwrap();
    }
    // Every remaining message has used its only receive; the lease sweeps them.
    assert!(q.lease(Timestamp(6_000)).unwrap().is_none());
    let mut dead = q.purge_and_delete(Timestamp(6_000));
    dead.sort();
    assert_eq!(dead, ["t1", "t2", "t3"]);
    assert!(q.purge_and_delete(Timestamp(7_000)).is_empty());
    assert!(q.counts(Timestamp(7_000)).deleted);
}
