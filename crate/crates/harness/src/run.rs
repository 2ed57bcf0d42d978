//! Timed benchmark runs and rebuild timing.

use std::io;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use dhash::{hash, reclaim, DHash, Error as TableError, HashFn};

use crate::config::{ConfigError, Mix, Pinning, RebuildMode, WorkloadConfig};
use crate::pin::Pinner;
use crate::report::{mean, std_dev, HostInfo, OpCounts, ThreadReport, ThroughputReport};
use crate::workload::{self, OpKind, OpStream};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failed to spawn thread: {0}")]
    Spawn(io::Error),
    #[error("worker thread panicked")]
    Panicked,
    #[error("table error: {0}")]
    Table(#[from] TableError),
}

/// The pair of hash functions a continuous rebuild alternates between.
pub fn hash_pair(seed: u64, same: bool) -> (HashFn, HashFn) {
    let a = hash::seeded(seed);
    let b = if same {
        a.clone()
    } else {
        hash::seeded(seed.wrapping_add(0x5851_f42d_4c95_7f2d))
    };
    (a, b)
}

/// Runs `ops` from a worker's stream until `stop` is set.
fn work(table: &DHash<u64>, mut ops: OpStream, stop: &AtomicBool) -> OpCounts {
    let mut c = OpCounts::default();
    'outer: loop {
        for _ in 0..64 {
            let (op, k) = ops.next().expect("streams are infinite");
            match op {
                OpKind::Lookup => {
                    c.lookups += 1;
                    c.lookup_hits += table.contains(k) as u64;
                }
                OpKind::Insert => {
                    c.inserts += 1;
                    c.insert_ok += table.insert(k, k).is_ok() as u64;
                }
                OpKind::Delete => {
                    c.deletes += 1;
                    c.delete_ok += table.delete(k).is_ok() as u64;
                }
            }
        }
        if stop.load(Ordering::Relaxed) {
            break 'outer;
        }
    }
    c
}

/// Rebuilds back and forth until `stop`, returning each rebuild's duration.
fn rebuild_loop(
    table: &DHash<u64>,
    base: usize,
    alt: usize,
    hashes: &(HashFn, HashFn),
    stop: &AtomicBool,
) -> Vec<f64> {
    let mut times = Vec::new();
    let mut to_alt = true;
    while !stop.load(Ordering::Relaxed) {
        let (nb, h) = if to_alt {
            (alt, hashes.1.clone())
        } else {
            (base, hashes.0.clone())
        };
        let t0 = Instant::now();
        match table.rebuild(nb, h) {
            Ok(_) => {
                times.push(t0.elapsed().as_secs_f64());
                to_alt = !to_alt;
            }
            Err(TableError::Busy) => thread::yield_now(),
            Err(e) => panic!("rebuild failed: {e}"),
        }
    }
    times
}

/// Start line for a run: threads check in, then wait for the signal.
struct Gate {
    ready: AtomicUsize,
    open: AtomicBool,
}

impl Gate {
    fn new() -> Gate {
        Gate {
            ready: AtomicUsize::new(0),
            open: AtomicBool::new(false),
        }
    }

    fn arrive_and_wait(&self) {
        self.ready.fetch_add(1, Ordering::AcqRel);
        while !self.open.load(Ordering::Acquire) {
            thread::yield_now();
        }
    }

    fn open_when(&self, n: usize) {
        while self.ready.load(Ordering::Acquire) < n {
            thread::yield_now();
        }
        self.open.store(true, Ordering::Release);
    }
}

/// Runs one benchmark configuration.
pub fn run(config: &WorkloadConfig) -> Result<ThroughputReport, RunError> {
    config.validate()?;
    let hashes = match config.rebuild {
        RebuildMode::Continuous { same_hash, .. } => hash_pair(config.seed, same_hash),
        RebuildMode::Off => hash_pair(config.seed, true),
    };
    let table: DHash<u64> = DHash::new(config.buckets, hashes.0.clone())?;
    let prefilled = workload::prefill(&table, config)?;

    let pinner = Pinner::new();
    let stop = AtomicBool::new(false);
    let gate = Gate::new();
    let results: Mutex<Vec<ThreadReport>> = Mutex::new(Vec::new());
    let mut rebuild_seconds = Vec::new();
    let mut spawn_error = None;
    let mut panicked = false;
    let mut elapsed = 0.0;
    let mut all_pinned = config.pinning == Pinning::PerformanceFirst;

    thread::scope(|s| {
        let mut workers = Vec::new();
        for i in 0..config.threads {
            let (table, stop, gate, results, pinner) = (&table, &stop, &gate, &results, &pinner);
            let spawned = thread::Builder::new()
                .name(format!("worker-{i}"))
                .spawn_scoped(s, move || {
                    let cpu = match config.pinning {
                        Pinning::PerformanceFirst => pinner.pin_worker(),
                        Pinning::None => None,
                    };
                    reclaim::register_current_thread();
                    let ops = OpStream::for_worker(config, i);
                    gate.arrive_and_wait();
                    let counts = work(table, ops, stop);
                    reclaim::unregister_current_thread();
                    results.lock().unwrap().push(ThreadReport {
                        thread: i,
                        cpu,
                        counts,
                    });
                    cpu.is_some()
                });
            match spawned {
                Ok(h) => workers.push(h),
                Err(e) => {
                    spawn_error = Some(e);
                    break;
                }
            }
        }
        let mut rebuilder = None;
        if let (RebuildMode::Continuous { alt_buckets, .. }, None) = (config.rebuild, &spawn_error)
        {
            let (table, stop, gate, hashes) = (&table, &stop, &gate, &hashes);
            match thread::Builder::new()
                .name("rebuild".into())
                .spawn_scoped(s, move || {
                    gate.arrive_and_wait();
                    rebuild_loop(table, config.buckets, alt_buckets, hashes, stop)
                }) {
                Ok(h) => rebuilder = Some(h),
                Err(e) => spawn_error = Some(e),
            }
        }
        if spawn_error.is_some() {
            stop.store(true, Ordering::Relaxed);
        }
        gate.open_when(workers.len() + rebuilder.is_some() as usize);
        let t0 = Instant::now();
        if spawn_error.is_none() {
            thread::sleep(config.duration);
            stop.store(true, Ordering::Relaxed);
        }
        for w in workers {
            match w.join() {
                Ok(pinned) => all_pinned &= pinned,
                Err(_) => panicked = true,
            }
        }
        elapsed = t0.elapsed().as_secs_f64();
        if let Some(r) = rebuilder {
            match r.join() {
                Ok(t) => rebuild_seconds = t,
                Err(_) => panicked = true,
            }
        }
    });
    if let Some(e) = spawn_error {
        return Err(RunError::Spawn(e));
    }
    if panicked {
        return Err(RunError::Panicked);
    }
    let mut threads = results.into_inner().unwrap();
    threads.sort_by_key(|t| t.thread);
    let mut totals = OpCounts::default();
    for t in &threads {
        totals.add(&t.counts);
    }
    reclaim::drain();
    if let Err(e) = table.check_invariants() {
        panic!("table corrupted after run: {e}");
    }
    Ok(ThroughputReport {
        config: config.clone(),
        host: HostInfo::current(all_pinned),
        elapsed_secs: elapsed,
        totals,
        threads,
        rebuild_seconds,
        prefilled,
        final_census: table.len() as u64,
    })
}

/// Timing of rebuilds at one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildSample {
    pub nodes: u64,
    pub buckets: usize,
    pub mix: Mix,
    /// Wall-clock duration of each rebuild.
    pub seconds: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
    /// CPU time the rebuilding thread itself spent in each rebuild. Unlike
    /// wall time this excludes slices given to workers sharing its core.
    pub cpu_seconds: Vec<f64>,
}

impl RebuildSample {
    pub fn median_s(&self) -> f64 {
        median(&self.seconds)
    }

    pub fn median_cpu_s(&self) -> f64 {
        median(&self.cpu_seconds)
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// CPU time consumed so far by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    let r = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(r, 0, "thread cpu clock unavailable");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// For each population, prefills a table at the configured load factor and
/// times `reps` rebuilds to twice the bucket count with a different hash,
/// while `config.threads` workers run the configured mix. The key range is
/// twice the population so that equal insert and delete rates keep it
/// steady.
/// The configured bucket count and key range are ignored.
pub fn measure_rebuild(
    config: &WorkloadConfig,
    node_counts: &[u64],
    reps: usize,
) -> Result<Vec<RebuildSample>, RunError> {
    WorkloadConfig {
        buckets: 1,
        key_range: u64::MAX,
        ..config.clone()
    }
    .validate()?;
    let mut out = Vec::new();
    for &nodes in node_counts {
        let buckets = ((nodes as f64 / config.load_factor).round() as usize).max(1);
        let key_range = (2 * nodes).max(1);
        let (ha, hb) = hash_pair(config.seed, false);
        let table: DHash<u64> = DHash::new(buckets, ha.clone())?;
        workload::prefill_count(&table, config.seed, nodes, key_range)?;
        let stop = AtomicBool::new(false);
        let gate = Gate::new();
        let mut seconds = Vec::with_capacity(reps);
        let mut cpu_seconds = Vec::with_capacity(reps);
        thread::scope(|s| -> Result<(), RunError> {
            let mut hs = Vec::new();
            for i in 0..config.threads {
                let (table, stop, gate) = (&table, &stop, &gate);
                let ops = OpStream::new(config.seed, i, config.mix, key_range);
                let spawned = thread::Builder::new().spawn_scoped(s, move || {
                    reclaim::register_current_thread();
                    gate.arrive_and_wait();
                    work(table, ops, stop);
                    reclaim::unregister_current_thread();
                });
                match spawned {
                    Ok(h) => hs.push(h),
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        gate.open_when(hs.len());
                        return Err(RunError::Spawn(e));
                    }
                }
            }
            gate.open_when(hs.len());
            thread::sleep(Duration::from_millis(20));
            for r in 0..reps {
                let (nb, h) = if r % 2 == 0 {
                    (2 * buckets, hb.clone())
                } else {
                    (buckets, ha.clone())
                };
                let (t0, c0) = (Instant::now(), thread_cpu_time());
                table.rebuild(nb, h)?;
                seconds.push(t0.elapsed().as_secs_f64());
                cpu_seconds.push((thread_cpu_time() - c0).as_secs_f64());
            }
            stop.store(true, Ordering::Relaxed);
            Ok(())
        })?;
        out.push(RebuildSample {
            nodes,
            buckets,
            mix: config.mix,
            mean_s: mean(&seconds),
            std_s: std_dev(&seconds),
            seconds,
            cpu_seconds,
        });
    }
    Ok(out)
}
