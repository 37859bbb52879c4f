//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ds_core::clock::Timestamp;
use ds_core::fleet::{InstanceState, MarketModel, PricePath, TerminationReason, MONITORING_RATE_PER_MACHINE_HOUR};
use ds_core::local::LocalBackend;
use ds_core::monitor::{monitor_tick, MonitorAction};
use ds_core::objectstore::{FsStore, MemoryStore, ObjectStore};
use ds_core::placement::PlacementAction;
use ds_core::queue::{LeaseEventKind, Queue, QueueCounts, Receipt};
use ds_core::sim::{simulate, SimOptions, Simulation};
use ds_core::specfiles::{
    expand_jobs, DoneCheck, FleetSpec, JobSpec, MachineType, Parameters, RunConfig, Scalar, TaskMessage,
};
use ds_core::world::World;
use ds_core::worker::SimulatedExecutor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

const DS: &str = env!("CARGO_BIN_EXE_ds");

/// sha256 over the report and every export file of the criterion 8 run,
/// frozen from a reference run.
const FROZEN_SIMULATE_DIGEST: &str = "f4c5e02c4082d61b3b6df19714eab00fc91f0a109dac7621260a2a2c5c1317a1";

fn config(app: &str) -> RunConfig {
    RunConfig {
        app_name: app.into(),
        image_ref: "registry.example/profiler:2".into(),
        machine_type: MachineType {
            name: "c5.xlarge".into(),
            cpu_units: 4096,
            memory_mb: 8192,
        },
        fleet_size: 2,
        max_price_per_hour: 0.20,
        tasks_per_machine: 2,
        task_cpu_units: 2048,
        task_memory_mb: 4096,
        visibility_timeout_s: 30,
        max_receive_count: 5,
        output_prefix: "results".into(),
        done_check: DoneCheck {
            enabled: true,
            expected_file_count: 1,
        },
        monitor_period_s: 30,
        teardown_hysteresis_ticks: 2,
        command_template: "profile --well {well}".into(),
    }
}

fn fleet_spec() -> FleetSpec {
    FleetSpec {
        account_id: "000000000000".into(),
        region: "local-1".into(),
        subnet_ids: vec!["subnet-a".into()],
        security_group_ids: vec!["sg-a".into()],
        instance_role: "agent-role".into(),
        key_name: "none".into(),
    }
}

fn job(n: usize) -> JobSpec {
    JobSpec {
        shared: [("plate".to_string(), Scalar::from("P1"))].into(),
        tasks: (0..n)
            .map(|i| {
                Parameters::from([
                    ("well".to_string(), Scalar::Str(format!("{}{:02}", (b'A' + (i / 12) as u8) as char, i % 12 + 1))),
                    ("site".to_string(), Scalar::Int((i % 3) as i64)),
                ])
            })
            .collect(),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

/// Run `ds` with `args`, returning its exit code.
fn ds(state_dir: &Path, args: &[&str]) -> Result<i32, String> {
    let out = Command::new(DS)
        .args(args)
        .env("DS_STATE_DIR", state_dir)
        .output()
        .map_err(|e| format!("could not run ds: {e}"))?;
    let code = out.status.code().unwrap_or(-1);
    if code != 0 && code != 1 {
        return Err(format!("`ds {}` exited {code}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(code)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 1. Ten machines, each alive exactly two simulated hours.
fn monitoring_rate() -> Check {
    let start = Instant::now();
    let mut config = config("overhead");
    config.fleet_size = 10;
    // One idle observation at the two-hour mark ends the run.
    config.monitor_period_s = 7200;
    config.teardown_hysteresis_ticks = 1;
    let store = MemoryStore::new();
    let options = SimOptions {
        startup_delay_s: 0,
        ..SimOptions::default()
    };
    let (report, world, _) = simulate(config, fleet_spec(), &[], MarketModel::constant(0.1), &store, options)
        .map_err(|e| e.to_string())?;
    let ledger = &report.ledger;
    ensure!(ledger.entries.len() == 10, "{} instances billed", ledger.entries.len());
    for e in &ledger.entries {
        ensure!(e.seconds_billed == 7200.0, "{} billed {} s", e.instance_id, e.seconds_billed);
    }
    ensure!(
        (ledger.monitoring_overhead - 0.0020).abs() <= 1e-9,
        "monitoring overhead {}",
        ledger.monitoring_overhead
    );
    ensure!(world.is_torn_down(), "run not torn down");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "overhead ${:.4} at ${MONITORING_RATE_PER_MACHINE_HOUR}/machine-hour",
        ledger.monitoring_overhead
    ))
}

/// State left behind by the local lifecycle run, for the tagging check.
struct LocalRun {
    _dir: tempfile::TempDir,
    state_dir: PathBuf,
    config: RunConfig,
    tasks: Vec<TaskMessage>,
}

/// 2. The four commands in order on the local backend.
fn lifecycle(slot: &mut Option<LocalRun>) -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let state_dir = dir.path().join("state");
    let mut config = config("lifecycle");
    config.monitor_period_s = 1;
    config.command_template = "touch out_{well}.txt".into();
    let job = job(10);
    let (cfg, fleet, jobs, report) = (
        dir.path().join("config.json"),
        dir.path().join("fleet.json"),
        dir.path().join("jobs.json"),
        dir.path().join("report.json"),
    );
    write_json(&cfg, &config);
    write_json(&fleet, &fleet_spec());
    write_json(&jobs, &job);

    let steps: [Vec<&str>; 4] = [
        vec![
            "setup", "--config", path_str(&cfg), "--fleet", path_str(&fleet), "--backend", "local",
            "--declared-output", "out_*.txt",
        ],
        vec!["submit-jobs", "--jobs", path_str(&jobs)],
        vec!["start-cluster"],
        vec!["monitor", "--report", path_str(&report)],
    ];
    for args in &steps {
        let code = ds(&state_dir, args)?;
        ensure!(code == 0, "`ds {}` exited {code}", args[0]);
    }

    let backend = LocalBackend::new(&state_dir, &config.app_name);
    let store = FsStore::new(backend.store_root()).map_err(|e| e.to_string())?;
    let objects = store.list_prefix(&format!("{}/", config.output_prefix)).map_err(|e| e.to_string())?;
    ensure!(objects.len() == 10, "{} objects under {}", objects.len(), config.output_prefix);
    let (deleted, cancelled) = backend
        .read(|w| {
            let deleted = w.queues.get(&config.queue_name()).is_ok_and(|q| q.is_deleted());
            let cancelled = w.fleet().is_some_and(|f| f.is_cancelled());
            (deleted, cancelled)
        })
        .map_err(|e| e.to_string())?;
    ensure!(deleted, "queue not deleted");
    ensure!(cancelled, "fleet not cancelled");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    let tasks = expand_jobs(&job, &config).unwrap();
    *slot = Some(LocalRun {
        _dir: dir,
        state_dir,
        config,
        tasks,
    });
    Ok(format!("10 objects, {:.1}s", elapsed.as_secs_f64()))
}

/// 3. A thousand tasks on a fleet the market keeps reclaiming.
fn effectively_once() -> Check {
    let start = Instant::now();
    let mut config = config("interrupted");
    config.fleet_size = 20;
    config.visibility_timeout_s = 120;
    config.max_receive_count = 10;
    let tasks = expand_jobs(&job(1000), &config).unwrap();
    let run = || {
        let store = MemoryStore::new();
        let market = MarketModel::new(3, 0.08, 60, PricePath::Constant, Some(2.0));
        let options = SimOptions {
            startup_delay_s: 30,
            executor: SimulatedExecutor {
                seed: 3,
                ..SimulatedExecutor::default()
            },
            ..SimOptions::default()
        };
        let out = simulate(config.clone(), fleet_spec(), &tasks, market, &store, options);
        out.map(|(report, _, stats)| (report, stats, store))
    };
    let (report, stats, store) = run().map_err(|e| e.to_string())?;
    let launched = report.instances_launched;
    let interrupted = stats.interrupted_mid_task.len();
    let share = interrupted as f64 / launched as f64;
    ensure!(share >= 0.2, "only {interrupted} of {launched} instances interrupted mid-task");
    ensure!(
        report.tasks.succeeded + report.tasks.skipped >= 1000,
        "{} succeeded, {} skipped",
        report.tasks.succeeded,
        report.tasks.skipped
    );
    ensure!(report.dlq_task_ids.is_empty(), "dlq holds {:?}", report.dlq_task_ids);
    let mut prefixes = BTreeMap::<String, usize>::new();
    for key in store.list_prefix(&format!("{}/", config.output_prefix)).unwrap() {
        let task = key.key.split('/').nth(1).unwrap().to_string();
        *prefixes.entry(task).or_default() += 1;
    }
    ensure!(prefixes.len() == 1000, "{} output prefixes", prefixes.len());
    let expected = config.done_check.expected_file_count as usize;
    ensure!(
        prefixes.values().all(|&n| n == expected),
        "some prefix does not hold exactly {expected} files"
    );
    let (again, _, _) = run().map_err(|e| e.to_string())?;
    ensure!(again.to_json() == report.to_json(), "second run differs");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "{interrupted}/{launched} instances interrupted mid-task ({:.0}%), {} deliveries",
        share * 100.0,
        stats.deliveries
    ))
}

/// 4. An always-failing task is delivered max_receive_count times, then
///    dead-lettered, and the monitor reports failure.
fn dead_letter() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let state_dir = dir.path().join("state");
    let mut config = config("poison");
    config.max_receive_count = 3;
    let job = job(6);
    let tasks = expand_jobs(&job, &config).unwrap();
    let poison = tasks[4].task_id.clone();
    let (cfg, fleet, jobs, report) = (
        dir.path().join("config.json"),
        dir.path().join("fleet.json"),
        dir.path().join("jobs.json"),
        dir.path().join("report.json"),
    );
    write_json(&cfg, &config);
    write_json(&fleet, &fleet_spec());
    write_json(&jobs, &job);
    let setup = ["setup", "--config", path_str(&cfg), "--fleet", path_str(&fleet), "--seed", "5", "--deny", &poison];
    ensure!(ds(&state_dir, &setup)? == 0, "setup failed");
    ensure!(ds(&state_dir, &["submit-jobs", "--jobs", path_str(&jobs)])? == 0, "submit-jobs failed");
    ensure!(ds(&state_dir, &["start-cluster"])? == 0, "start-cluster failed");
    let code = ds(&state_dir, &["monitor", "--report", path_str(&report)])?;
    ensure!(code == 1, "monitor exited {code}");

    let backend = LocalBackend::new(&state_dir, &config.app_name);
    let (deliveries, dlq) = backend
        .read(|w| {
            let queue = w.queues.get(&config.queue_name()).unwrap();
            // Messages are enqueued in task order.
            let poison_msg = queue
                .history()
                .iter()
                .filter(|e| e.kind == LeaseEventKind::Enqueued)
                .nth(4)
                .map(|e| e.message_id.clone());
            let deliveries = queue
                .history()
                .iter()
                .filter(|e| Some(&e.message_id) == poison_msg.as_ref() && e.kind == LeaseEventKind::Leased)
                .count();
            (deliveries, w.final_report.as_ref().map(|r| r.dlq_task_ids.clone()))
        })
        .map_err(|e| e.to_string())?;
    ensure!(deliveries == 3, "poison task delivered {deliveries} times");
    ensure!(dlq.as_deref() == Some(&[poison.clone()][..]), "dlq is {dlq:?}");
    let written: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    ensure!(written["dlq_task_ids"] == serde_json::json!([poison]), "report file dlq is {}", written["dlq_task_ids"]);
    Ok(format!("{poison} delivered 3 times, dead-lettered, monitor exit 1"))
}

/// 5. Demand falls from 40 to 6 with four agents per machine.
fn downscale() -> Check {
    let mut config = config("downscale");
    config.fleet_size = 10;
    config.tasks_per_machine = 4;
    config.task_cpu_units = 1024;
    config.task_memory_mb = 2048;
    config.done_check.enabled = false;
    let tasks = expand_jobs(&job(40), &config).unwrap();
    let mut world = World::setup(config.clone(), fleet_spec(), MarketModel::constant(0.1)).map_err(|e| e.to_string())?;
    world.submit(&tasks, Timestamp::ZERO).map_err(|e| e.to_string())?;
    world.start_cluster(0, Timestamp::ZERO).map_err(|e| e.to_string())?;
    let actions = world.fleet_tick(Timestamp::ZERO).map_err(|e| e.to_string())?;
    for a in &actions {
        if let PlacementAction::Start { placement_id, .. } = a {
            world.cluster.mark_running(placement_id).map_err(|e| e.to_string())?;
        }
    }
    let now = Timestamp::from_secs(5);
    let mut receipts: Vec<Receipt> = Vec::new();
    while let Some((_, r)) = world.lease(now).map_err(|e| e.to_string())? {
        receipts.push(r);
    }
    ensure!(receipts.len() == 40, "leased {}", receipts.len());
    ensure!(world.queue_counts(now).demand() == 40, "demand before is not 40");
    for r in &receipts[..34] {
        world.ack(r, now).map_err(|e| e.to_string())?;
    }
    ensure!(world.queue_counts(now).demand() == 6, "demand after is not 6");

    // Idle agents on some machines have exited since the last reconcile.
    let running: Vec<String> = world
        .fleet()
        .unwrap()
        .instances()
        .filter(|i| i.state == InstanceState::Running)
        .map(|i| i.instance_id.clone())
        .collect();
    ensure!(running.len() == 10, "{} running before downscale", running.len());
    let exits = [3usize, 4, 1, 2, 0, 4, 3, 2, 1, 4];
    for (id, &n) in running.iter().zip(&exits) {
        let ids: Vec<String> = world
            .cluster
            .placements()
            .filter(|p| &p.instance_id == id && p.is_live())
            .take(n)
            .map(|p| p.placement_id.clone())
            .collect();
        for p in ids {
            world.cluster.mark_stopped(&p).map_err(|e| e.to_string())?;
        }
    }
    let load: BTreeMap<String, usize> = running.iter().map(|id| (id.clone(), world.cluster.live_placements(id))).collect();

    let tick = Timestamp::from_secs(u64::from(config.monitor_period_s));
    let actions = monitor_tick(&mut world, tick, None).map_err(|e| e.to_string())?;
    ensure!(
        actions.contains(&MonitorAction::SetTargetCapacity { from: 10, to: 2 }),
        "monitor actions {actions:?}"
    );
    let target = world.fleet().unwrap().target_capacity();
    ensure!(target == 2, "target {target}");

    world.fleet_tick(tick.plus_secs(1)).map_err(|e| e.to_string())?;
    let fleet = world.fleet().unwrap();
    let alive: Vec<&str> = fleet.instances().filter(|i| i.is_alive()).map(|i| i.instance_id.as_str()).collect();
    let up = fleet.count(InstanceState::Running);
    ensure!(up == 2 && alive.len() == 2, "{up} running, {} alive", alive.len());
    let removed: Vec<&str> = fleet
        .instances()
        .filter(|i| i.termination_reason == Some(TerminationReason::CapacityReduced))
        .map(|i| i.instance_id.as_str())
        .collect();
    let kept_min = alive.iter().map(|id| load[*id]).min().unwrap();
    for id in &removed {
        ensure!(load[*id] <= kept_min, "{id} with {} live placements removed before one with {kept_min}", load[*id]);
    }
    Ok(format!("target 40 -> 2, kept {alive:?} with {kept_min}+ live placements"))
}

/// 6. Teardown follows the drain promptly and the bill stops.
fn teardown_liveness() -> Check {
    let mut config = config("liveness");
    config.fleet_size = 4;
    let tasks = expand_jobs(&job(30), &config).unwrap();
    let store = MemoryStore::new();
    let market = MarketModel::new(8, 0.08, 60, PricePath::Constant, Some(1.0));
    let mut sim = Simulation::new(config.clone(), fleet_spec(), &tasks, market, &store, SimOptions::default())
        .map_err(|e| e.to_string())?;
    let report = sim.run().map_err(|e| e.to_string())?;
    let (world, stats, _) = sim.into_parts();
    let drained = stats.drained_at.ok_or("queue never drained")?;
    let down = stats.torn_down_at.ok_or("never torn down")?;
    let bound_ms = (u64::from(config.teardown_hysteresis_ticks) + 1) * u64::from(config.monitor_period_s) * 1000;
    let lag = down.as_millis() - drained.as_millis();
    ensure!(lag <= bound_ms, "teardown {lag} ms after drain, bound {bound_ms} ms");
    let later = world.ledger(down.plus_secs(3600));
    ensure!(world.ledger(down.plus_secs(60)) == later, "ledger still accruing");
    ensure!(later == report.ledger, "report ledger differs from the frozen one");

    let dir = tempfile::tempdir().unwrap();
    let state_dir = dir.path().join("state");
    let (cfg, fleet, jobs) = (dir.path().join("config.json"), dir.path().join("fleet.json"), dir.path().join("jobs.json"));
    write_json(&cfg, &config);
    write_json(&fleet, &fleet_spec());
    write_json(&jobs, &job(30));
    ds(&state_dir, &["setup", "--config", path_str(&cfg), "--fleet", path_str(&fleet), "--seed", "8"])?;
    ds(&state_dir, &["submit-jobs", "--jobs", path_str(&jobs)])?;
    ds(&state_dir, &["start-cluster"])?;
    let (first, second) = (dir.path().join("first.json"), dir.path().join("second.json"));
    let a = ds(&state_dir, &["monitor", "--report", path_str(&first)])?;
    let b = ds(&state_dir, &["monitor", "--report", path_str(&second)])?;
    ensure!(a == 0 && b == 0, "monitor exited {a} then {b}");
    let (first, second) = (std::fs::read(first).unwrap(), std::fs::read(second).unwrap());
    ensure!(first == second, "second monitor report differs");
    Ok(format!("teardown {:.0}s after drain (bound {}s)", lag as f64 / 1000.0, bound_ms / 1000))
}

#[derive(Clone, Copy, PartialEq)]
enum Fate {
    Live,
    Acked,
    Dead,
}

/// Plain list of messages, scanned linearly on every operation.
struct NaiveQueue {
    vt_ms: u64,
    max_receives: u32,
    msgs: Vec<(String, u64, u32, u64, Fate)>,
}

impl NaiveQueue {
    fn lease(&mut self, now: u64) -> Option<(String, u64)> {
        loop {
            let (vt, max) = (self.vt_ms, self.max_receives);
            let m = self
                .msgs
                .iter_mut()
                .filter(|m| m.4 == Fate::Live && m.1 <= now)
                .min_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)))?;
            if m.2 >= max {
                m.4 = Fate::Dead;
                continue;
            }
            m.2 += 1;
            m.1 = now + vt;
            m.3 += 1;
            return Some((m.0.clone(), m.3));
        }
    }

    fn held(&mut self, id: &str, generation: u64, now: u64) -> Option<&mut (String, u64, u32, u64, Fate)> {
        self.msgs
            .iter_mut()
            .find(|m| m.0 == id && m.4 == Fate::Live && m.3 == generation && m.1 > now)
    }

    fn counts(&self, now: u64) -> QueueCounts {
        let mut c = QueueCounts::default();
        for m in &self.msgs {
            match m.4 {
                Fate::Acked => {}
                Fate::Dead => c.dlq += 1,
                Fate::Live if m.1 > now => c.in_flight += 1,
                Fate::Live if m.2 >= self.max_receives => c.dlq += 1,
                Fate::Live => c.visible += 1,
            }
        }
        c
    }
}

/// 7. Ten thousand random operations against the naive list.
fn queue_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (vt_s, max_receives) = (7u32, 3u32);
    let mut queue = Queue::new("oracle", vt_s, max_receives).map_err(|e| e.to_string())?;
    let mut naive = NaiveQueue {
        vt_ms: u64::from(vt_s) * 1000,
        max_receives,
        msgs: Vec::new(),
    };
    let mut receipts: Vec<(Receipt, String, u64)> = Vec::new();
    let mut now = 0u64;
    for op in 0..10_000 {
        let t = Timestamp(now);
        match rng.random_range(0..10) {
            0..=2 => {
                let n = naive.msgs.len();
                let body = TaskMessage {
                    task_id: format!("t{n}"),
                    parameters: Parameters::new(),
                    output_prefix: format!("out/t{n}"),
                };
                let id = queue.enqueue(body, t).map_err(|e| e.to_string())?;
                naive.msgs.push((id, now, 0, 0, Fate::Live));
            }
            3..=5 => {
                let got = queue.lease(t).map_err(|e| e.to_string())?;
                let want = naive.lease(now);
                let got_id = got.as_ref().map(|(_, r)| r.message_id.clone());
                ensure!(got_id == want.as_ref().map(|w| w.0.clone()), "op {op}: lease {got_id:?} vs {want:?}");
                if let (Some((_, r)), Some((id, g))) = (got, want) {
                    receipts.push((r, id, g));
                }
            }
            6 | 7 if !receipts.is_empty() => {
                let (r, id, g) = receipts[rng.random_range(0..receipts.len())].clone();
                let ok = queue.ack(&r, t).is_ok();
                let want = naive.held(&id, g, now).map(|m| m.4 = Fate::Acked).is_some();
                ensure!(ok == want, "op {op}: ack {ok} vs {want}");
            }
            8 if !receipts.is_empty() => {
                let (r, id, g) = receipts[rng.random_range(0..receipts.len())].clone();
                let extra = rng.random_range(1..20u32);
                let got = queue.extend_lease(&r, extra, t);
                let want = naive.held(&id, g, now).map(|m| {
                    m.1 = now + u64::from(extra) * 1000;
                    m.3 += 1;
                    m.3
                });
                ensure!(got.is_ok() == want.is_some(), "op {op}: extend disagrees");
                if let (Ok(fresh), Some(g)) = (got, want) {
                    receipts.push((fresh, id, g));
                }
            }
            _ => now += rng.random_range(0..6_000),
        }
        let t = Timestamp(now);
        let counts = queue.counts(t);
        ensure!(counts == naive.counts(now), "op {op}: counts {counts:?} vs {:?}", naive.counts(now));
        let acked = naive.msgs.iter().filter(|m| m.4 == Fate::Acked).count();
        ensure!(
            counts.visible + counts.in_flight + counts.dlq + acked == naive.msgs.len(),
            "op {op}: messages lost"
        );
    }
    Ok(format!("10000 ops, {} messages, none lost", naive.msgs.len()))
}

fn digest_dir(hasher: &mut Sha256, dir: &Path) -> usize {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    for f in &files {
        hasher.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        hasher.update(std::fs::read(f).unwrap());
    }
    files.len()
}

/// 8. `simulate` with a fixed seed is byte-for-byte reproducible.
fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config("repro");
    config.fleet_size = 5;
    let (cfg, fleet, jobs) = (dir.path().join("config.json"), dir.path().join("fleet.json"), dir.path().join("jobs.json"));
    write_json(&cfg, &config);
    write_json(&fleet, &fleet_spec());
    write_json(&jobs, &job(60));
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let report = dir.path().join(format!("{run}.json"));
        let export = dir.path().join(format!("{run}.export"));
        let args = [
            "simulate", "--config", path_str(&cfg), "--fleet", path_str(&fleet), "--jobs", path_str(&jobs),
            "--report", path_str(&report), "--export-dir", path_str(&export), "--seed", "11",
            "--price-volatility", "0.2", "--interruption-rate", "1.5", "--failure-probability", "0.05",
        ];
        ds(dir.path(), &args)?;
        let mut hasher = Sha256::new();
        hasher.update(std::fs::read(&report).unwrap());
        let files = digest_dir(&mut hasher, &export);
        ensure!(files > 0, "no telemetry exported");
        digests.push(format!("{:x}", hasher.finalize()));
    }
    ensure!(digests[0] == digests[1], "runs differ: {} vs {}", digests[0], digests[1]);
    ensure!(digests[0] == FROZEN_SIMULATE_DIGEST, "digest {} differs from the frozen one", digests[0]);
    Ok(format!("sha256 {}", &digests[0][..16]))
}

/// 9. Every parameter value in the job finds exactly its tasks' streams.
fn tagging(run: Option<&LocalRun>) -> Check {
    let run = run.ok_or("needs the lifecycle run, which failed")?;
    let backend = LocalBackend::new(&run.state_dir, &run.config.app_name);
    let world = backend.read(|w| w.clone()).map_err(|e| e.to_string())?;
    let all: Vec<String> = world.telemetry.query_logs(&BTreeMap::new()).iter().map(|s| s.stream_id.clone()).collect();
    let mut values: Vec<(String, Scalar)> = Vec::new();
    for t in &run.tasks {
        for (k, v) in &t.parameters {
            if !values.contains(&(k.clone(), v.clone())) {
                values.push((k.clone(), v.clone()));
            }
        }
    }
    for (key, value) in &values {
        let tasks: BTreeSet<&str> = run
            .tasks
            .iter()
            .filter(|t| t.parameters.get(key) == Some(value))
            .map(|t| t.task_id.as_str())
            .collect();
        let want: BTreeSet<&str> = all
            .iter()
            .map(String::as_str)
            .filter(|s| tasks.contains(s.split('.').next().unwrap()))
            .collect();
        let filter = BTreeMap::from([(key.clone(), value.clone())]);
        let got: BTreeSet<&str> = world.telemetry.query_logs(&filter).iter().map(|s| s.stream_id.as_str()).collect();
        let covered: BTreeSet<&str> = got.iter().map(|s| s.split('.').next().unwrap()).collect();
        ensure!(covered == tasks, "{key}={value}: streams cover tasks {covered:?}, want {tasks:?}");
        ensure!(got == want, "{key}={value}: got {got:?}, want {want:?}");
    }
    Ok(format!("{} parameter values over {} streams", values.len(), all.len()))
}

fn main() {
    let mut local = None;
    let mut failed = 0;
    let mut report = |n: u32, name: &str, check: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(&mut *check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n}. {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n}. {name}: {why} [{secs:.2}s]");
            }
        }
    };
    report(1, "monitoring cost rate", &mut monitoring_rate);
    report(2, "local lifecycle", &mut || lifecycle(&mut local));
    report(3, "effectively-once under interruption", &mut effectively_once);
    report(4, "dead-letter policy", &mut dead_letter);
    report(5, "downscale", &mut downscale);
    report(6, "teardown liveness and frozen ledger", &mut teardown_liveness);
    report(7, "queue conservation oracle", &mut queue_oracle);
    report(8, "determinism", &mut determinism);
    report(9, "telemetry tagging", &mut || tagging(local.as_ref()));
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
