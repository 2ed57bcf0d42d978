//! Time-bounded stress suites for the three table guarantees under a
//! continuously rebuilding thread:
//!
//! * resident-lookup: a key inserted and never deleted is always found.
//! * racing-delete: deleting a key known to be present succeeds, and of two
//!   racing deletes exactly one does.
//! * insert-visibility: an insert that succeeded is visible to the inserting
//!   thread's next lookup, and survives every rebuild exactly once.
//!
//! Every node carries a payload that counts live instances, so each run also
//! checks that dropping the table and draining reclamation frees every node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use dhash::{hash, reclaim, DHash, Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    ResidentLookup,
    RacingDelete,
    InsertVisibility,
}

impl Suite {
    pub const ALL: [Suite; 3] = [
        Suite::ResidentLookup,
        Suite::RacingDelete,
        Suite::InsertVisibility,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::ResidentLookup => "resident-lookup",
            Suite::RacingDelete => "racing-delete",
            Suite::InsertVisibility => "insert-visibility",
        })
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "resident-lookup" => Ok(Suite::ResidentLookup),
            "racing-delete" => Ok(Suite::RacingDelete),
            "insert-visibility" => Ok(Suite::InsertVisibility),
            _ => Err(format!(
                "unknown suite {s:?}; expected resident-lookup, racing-delete or insert-visibility"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StressConfig {
    pub duration: Duration,
    pub seed: u64,
    /// Reader, deleter or inserter threads, besides the rebuilder.
    pub threads: usize,
    pub rebuild: bool,
}

impl StressConfig {
    pub fn new(seconds: f64, seed: u64) -> StressConfig {
        StressConfig {
            duration: Duration::from_secs_f64(seconds),
            seed,
            threads: 4,
            rebuild: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub suite: Suite,
    pub seed: u64,
    pub threads: usize,
    pub elapsed_secs: f64,
    pub rebuilds: u64,
    /// Operations whose result was checked.
    pub checked: u64,
    pub violations: u64,
    /// The first few violations, described.
    pub samples: Vec<String>,
    /// The table held exactly the expected keys, once each, at the end.
    pub census_exact: bool,
    /// Nodes still allocated after the table was dropped and reclamation
    /// drained.
    pub leaked_nodes: i64,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.census_exact && self.leaked_nodes == 0
    }
}

/// Payload that tracks how many nodes are alive.
struct Tracked {
    live: Arc<AtomicI64>,
}

impl Tracked {
    fn new(live: &Arc<AtomicI64>) -> Tracked {
        live.fetch_add(1, Ordering::Relaxed);
        Tracked {
            live: Arc::clone(live),
        }
    }
}

impl Drop for Tracked {
    fn drop(&mut self) {
        self.live.fetch_sub(1, Ordering::Relaxed);
    }
}

const MAX_SAMPLES: usize = 10;

#[derive(Default)]
struct Violations {
    count: AtomicU64,
    samples: Mutex<Vec<String>>,
}

impl Violations {
    fn record(&self, what: impl FnOnce() -> String) {
        if self.count.fetch_add(1, Ordering::Relaxed) < MAX_SAMPLES as u64 {
            self.samples
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(what());
        }
    }
}

struct Ctx<'a> {
    table: &'a DHash<Tracked>,
    live: &'a Arc<AtomicI64>,
    stop: &'a AtomicBool,
    bad: &'a Violations,
    seed: u64,
}

/// Buckets and hash seeds the rebuilder alternates between.
fn rebuild_loop(table: &DHash<Tracked>, stop: &AtomicBool, seed: u64, shapes: [usize; 2]) -> u64 {
    let mut rng = SmallRng::seed_from_u64(seed ^ 0xb1d);
    let mut n = 0;
    while !stop.load(Ordering::Relaxed) {
        let nb = shapes[n as usize % 2];
        match table.rebuild(nb, hash::seeded(rng.random())) {
            Ok(_) => n += 1,
            Err(Error::Busy) => thread::yield_now(),
            Err(e) => panic!("rebuild failed: {e}"),
        }
    }
    n
}

pub fn run(suite: Suite, config: &StressConfig) -> StressReport {
    let live = Arc::new(AtomicI64::new(0));
    let table: DHash<Tracked> = DHash::new(64, hash::seeded(config.seed)).expect("nonzero buckets");
    let stop = AtomicBool::new(false);
    let bad = Violations::default();
    let start = Instant::now();
    let ctx = Ctx {
        table: &table,
        live: &live,
        stop: &stop,
        bad: &bad,
        seed: config.seed,
    };
    let mut rebuilds = 0;
    let (checked, expected) = thread::scope(|s| {
        let rebuilder = config.rebuild.then(|| {
            let (table, stop) = (&table, &stop);
            s.spawn(move || rebuild_loop(table, stop, config.seed, [64, 97]))
        });
        let body = s.spawn(|| match suite {
            Suite::ResidentLookup => resident_lookup(&ctx, config),
            Suite::RacingDelete => racing_delete(&ctx, config),
            Suite::InsertVisibility => insert_visibility(&ctx, config),
        });
        let r = body.join().expect("suite panicked");
        stop.store(true, Ordering::Relaxed);
        if let Some(h) = rebuilder {
            rebuilds = h.join().expect("rebuilder panicked");
        }
        r
    });
    let elapsed = start.elapsed().as_secs_f64();
    let census = table.keys();
    let unique: BTreeSet<u64> = census.iter().copied().collect();
    let mut census_exact = unique.len() == census.len() && unique == expected;
    if let Err(e) = table.check_invariants() {
        bad.record(|| format!("invariants: {e}"));
        census_exact = false;
    }
    if !census_exact {
        let missing: Vec<_> = expected.difference(&unique).take(5).collect();
        let extra: Vec<_> = unique.difference(&expected).take(5).collect();
        bad.record(|| {
            format!(
                "census: {} keys ({} distinct), expected {}; missing {missing:?} extra {extra:?}",
                census.len(),
                unique.len(),
                expected.len()
            )
        });
    }
    drop(table);
    reclaim::drain();
    let samples = bad.samples.into_inner().unwrap_or_else(|e| e.into_inner());
    StressReport {
        suite,
        seed: config.seed,
        threads: config.threads,
        elapsed_secs: elapsed,
        rebuilds,
        checked,
        violations: bad.count.load(Ordering::Relaxed),
        samples,
        census_exact,
        leaked_nodes: live.load(Ordering::Relaxed),
    }
}

fn until(config: &StressConfig) -> Instant {
    Instant::now() + config.duration
}

/// Readers look up resident keys, which are never deleted, while one thread
/// churns the keys in between.
fn resident_lookup(ctx: &Ctx<'_>, config: &StressConfig) -> (u64, BTreeSet<u64>) {
    const RESIDENT: u64 = 1024;
    let resident: BTreeSet<u64> = (0..RESIDENT).map(|i| 2 * i).collect();
    for &k in &resident {
        ctx.table
            .insert(k, Tracked::new(ctx.live))
            .expect("fresh key");
    }
    let deadline = until(config);
    let churned = thread::scope(|s| {
        let churn = s.spawn(|| {
            reclaim::register_current_thread();
            let mut rng = SmallRng::seed_from_u64(ctx.seed ^ 0xc4);
            let mut present = BTreeSet::new();
            while Instant::now() < deadline {
                for _ in 0..64 {
                    let k = 2 * rng.random_range(0..RESIDENT) + 1;
                    if present.remove(&k) {
                        ctx.table.delete(k).expect("churn key present");
                    } else {
                        ctx.table
                            .insert(k, Tracked::new(ctx.live))
                            .expect("churn key absent");
                        present.insert(k);
                    }
                }
                thread::yield_now();
            }
            reclaim::unregister_current_thread();
            present
        });
        let readers: Vec<_> = (0..config.threads)
            .map(|t| {
                s.spawn(move || {
                    reclaim::register_current_thread();
                    let mut rng = SmallRng::seed_from_u64(ctx.seed.wrapping_add(t as u64));
                    let mut n = 0u64;
                    while Instant::now() < deadline {
                        for _ in 0..256 {
                            let k = 2 * rng.random_range(0..RESIDENT);
                            if !ctx.table.contains(k) {
                                ctx.bad.record(|| format!("resident key {k} not found"));
                            }
                        }
                        n += 256;
                    }
                    reclaim::unregister_current_thread();
                    n
                })
            })
            .collect();
        let n: u64 = readers
            .into_iter()
            .map(|h| h.join().expect("reader panicked"))
            .sum();
        let present = churn.join().expect("churn panicked");
        (n, present)
    });
    let (lookups, present) = churned;
    (lookups, resident.union(&present).copied().collect())
}

/// Each deleter owns a key range and knows exactly which of its keys are
/// present. Two racers delete from a shared range that a refiller keeps
/// inserting into; per-key success counts must balance.
fn racing_delete(ctx: &Ctx<'_>, config: &StressConfig) -> (u64, BTreeSet<u64>) {
    const OWNED: u64 = 512;
    const SHARED_BASE: u64 = 1 << 40;
    const SHARED: u64 = 64;
    let deadline = until(config);
    let inserted: Vec<AtomicU64> = (0..SHARED).map(|_| AtomicU64::new(0)).collect();
    let deleted: Vec<AtomicU64> = (0..SHARED).map(|_| AtomicU64::new(0)).collect();
    let (inserted, deleted) = (&inserted, &deleted);
    let (checked, mut expected) = thread::scope(|s| {
        let owners: Vec<_> = (0..config.threads)
            .map(|t| {
                s.spawn(move || {
                    reclaim::register_current_thread();
                    let mut rng = SmallRng::seed_from_u64(ctx.seed.wrapping_add(t as u64));
                    let base = t as u64 * OWNED;
                    let mut present = BTreeSet::new();
                    let mut n = 0u64;
                    while Instant::now() < deadline && !ctx.stop.load(Ordering::Relaxed) {
                        for _ in 0..64 {
                            let k = base + rng.random_range(0..OWNED);
                            if present.contains(&k) {
                                match ctx.table.delete(k) {
                                    Ok(()) => {
                                        present.remove(&k);
                                    }
                                    Err(e) => {
                                        ctx.bad.record(|| format!("delete of present key {k}: {e}"))
                                    }
                                }
                            } else if rng.random_bool(0.2) {
                                if ctx.table.delete(k).is_ok() {
                                    ctx.bad
                                        .record(|| format!("delete of absent key {k} succeeded"));
                                }
                            } else {
                                match ctx.table.insert(k, Tracked::new(ctx.live)) {
                                    Ok(()) => {
                                        present.insert(k);
                                    }
                                    Err(e) => {
                                        ctx.bad.record(|| format!("insert of absent key {k}: {e}"))
                                    }
                                }
                            }
                            n += 1;
                        }
                    }
                    reclaim::unregister_current_thread();
                    (n, present)
                })
            })
            .collect();
        let refill = s.spawn(move || {
            reclaim::register_current_thread();
            let mut rng = SmallRng::seed_from_u64(ctx.seed ^ 0x2ef);
            while Instant::now() < deadline {
                for _ in 0..16 {
                    let i = rng.random_range(0..SHARED);
                    if ctx
                        .table
                        .insert(SHARED_BASE + i, Tracked::new(ctx.live))
                        .is_ok()
                    {
                        inserted[i as usize].fetch_add(1, Ordering::Relaxed);
                    }
                }
                thread::yield_now();
            }
            reclaim::unregister_current_thread();
        });
        let racers: Vec<_> = (0..2)
            .map(|r| {
                s.spawn(move || {
                    reclaim::register_current_thread();
                    let mut rng = SmallRng::seed_from_u64(ctx.seed ^ (0xace + r));
                    let mut n = 0u64;
                    while Instant::now() < deadline {
                        for _ in 0..16 {
                            let i = rng.random_range(0..SHARED);
                            if ctx.table.delete(SHARED_BASE + i).is_ok() {
                                deleted[i as usize].fetch_add(1, Ordering::Relaxed);
                            }
                            n += 1;
                        }
                        thread::yield_now();
                    }
                    reclaim::unregister_current_thread();
                    n
                })
            })
            .collect();
        let mut checked = 0;
        let mut expected = BTreeSet::new();
        for h in owners {
            let (n, present) = h.join().expect("deleter panicked");
            checked += n;
            expected.extend(present);
        }
        refill.join().expect("refiller panicked");
        for h in racers {
            checked += h.join().expect("racer panicked");
        }
        (checked, expected)
    });
    let census: BTreeSet<u64> = ctx.table.keys().into_iter().collect();
    for i in 0..SHARED {
        let (ins, del) = (
            inserted[i as usize].load(Ordering::Relaxed),
            deleted[i as usize].load(Ordering::Relaxed),
        );
        let k = SHARED_BASE + i;
        match ins.checked_sub(del) {
            Some(0) => {}
            Some(1) => {
                expected.insert(k);
            }
            _ => ctx.bad.record(|| {
                format!("key {k}: {ins} successful inserts but {del} successful deletes")
            }),
        }
        if ins > del && !census.contains(&k) {
            ctx.bad
                .record(|| format!("key {k} inserted {ins} and deleted {del} times but absent"));
        }
    }
    (checked, expected)
}

/// Inserters add fresh keys and look each up straight away. Every thread
/// keeps a window of its recent keys, deleting the oldest and re-inserting
/// some, so inserts race the rebuilder on keys it is moving.
fn insert_visibility(ctx: &Ctx<'_>, config: &StressConfig) -> (u64, BTreeSet<u64>) {
    const WINDOW: usize = 1024;
    let deadline = until(config);
    thread::scope(|s| {
        let inserters: Vec<_> = (0..config.threads)
            .map(|t| {
                s.spawn(move || {
                    reclaim::register_current_thread();
                    let mut rng = SmallRng::seed_from_u64(ctx.seed.wrapping_add(t as u64));
                    let mut next = (t as u64) << 40;
                    let mut window: VecDeque<u64> = VecDeque::new();
                    let mut gone: BTreeMap<u64, ()> = BTreeMap::new();
                    let mut n = 0u64;
                    let insert_and_check = |k: u64, n: &mut u64| {
                        match ctx.table.insert(k, Tracked::new(ctx.live)) {
                            Ok(()) => {
                                if !ctx.table.contains(k) {
                                    ctx.bad.record(|| {
                                        format!("key {k} not found right after its insert")
                                    });
                                }
                            }
                            Err(e) => ctx.bad.record(|| format!("insert of absent key {k}: {e}")),
                        }
                        *n += 2;
                    };
                    while Instant::now() < deadline {
                        for _ in 0..64 {
                            if !gone.is_empty() && rng.random_bool(0.3) {
                                let k = *gone
                                    .keys()
                                    .nth(rng.random_range(0..gone.len()))
                                    .expect("nonempty");
                                gone.remove(&k);
                                insert_and_check(k, &mut n);
                                window.push_back(k);
                            } else {
                                insert_and_check(next, &mut n);
                                window.push_back(next);
                                next += 1;
                            }
                            if window.len() > WINDOW {
                                let old = window.pop_front().expect("nonempty");
                                if let Err(e) = ctx.table.delete(old) {
                                    ctx.bad
                                        .record(|| format!("delete of inserted key {old}: {e}"));
                                }
                                n += 1;
                                if gone.len() < WINDOW {
                                    gone.insert(old, ());
                                }
                            }
                        }
                    }
                    reclaim::unregister_current_thread();
                    (n, window)
                })
            })
            .collect();
        let mut checked = 0;
        let mut expected = BTreeSet::new();
        for h in inserters {
            let (n, window) = h.join().expect("inserter panicked");
            checked += n;
            expected.extend(window);
        }
        (checked, expected)
    })
}
