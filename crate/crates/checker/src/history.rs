//! Concurrent histories of set operations, and recording them from a live
//! table.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use dhash::{hash, reclaim, DHash, SchedulePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Lookup,
    Insert,
    Delete,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Lookup => "lookup",
            OpKind::Insert => "insert",
            OpKind::Delete => "delete",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Invoke,
    Response,
}

/// One invocation or response. `result` is set on responses only: found for
/// a lookup, success for an insert or delete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub thread: usize,
    pub op: OpKind,
    pub key: u64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<bool>,
    /// Nanoseconds on a monotonic clock shared by all threads.
    pub time: u64,
}

/// Interval during which a rebuild was running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebuildWindow {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    /// Keys present before the first event.
    #[serde(default)]
    pub initial: Vec<u64>,
    pub events: Vec<HistoryEvent>,
    #[serde(default)]
    pub rebuilds: Vec<RebuildWindow>,
}

/// A completed operation: an invoke paired with its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub thread: usize,
    pub op: OpKind,
    pub key: u64,
    pub result: bool,
    pub invoke: u64,
    pub response: u64,
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t{} {}({}) -> {} [{}, {}]",
            self.thread, self.op, self.key, self.result, self.invoke, self.response
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("thread {thread}: response without a pending invoke")]
    Unmatched { thread: usize },
    #[error("thread {thread}: invoke while another operation is pending")]
    Overlapping { thread: usize },
    #[error("thread {thread}: response does not match its invoke")]
    Mismatch { thread: usize },
    #[error("thread {thread}: response without a result")]
    MissingResult { thread: usize },
    #[error("thread {thread}: operation never completed")]
    Incomplete { thread: usize },
    #[error("thread {thread}: response precedes its invoke")]
    TimeReversed { thread: usize },
}

impl History {
    /// Pairs invokes with responses, checking that every thread alternates
    /// between the two in event order. Operations come out in invoke order.
    pub fn operations(&self) -> Result<Vec<Operation>, HistoryError> {
        let mut pending: Vec<Option<&HistoryEvent>> = Vec::new();
        let mut ops = Vec::new();
        for e in &self.events {
            if pending.len() <= e.thread {
                pending.resize(e.thread + 1, None);
            }
            let slot = &mut pending[e.thread];
            match e.phase {
                Phase::Invoke => {
                    if slot.is_some() {
                        return Err(HistoryError::Overlapping { thread: e.thread });
                    }
                    *slot = Some(e);
                }
                Phase::Response => {
                    let inv = slot
                        .take()
                        .ok_or(HistoryError::Unmatched { thread: e.thread })?;
                    if inv.op != e.op || inv.key != e.key {
                        return Err(HistoryError::Mismatch { thread: e.thread });
                    }
                    if e.time < inv.time {
                        return Err(HistoryError::TimeReversed { thread: e.thread });
                    }
                    ops.push(Operation {
                        thread: e.thread,
                        op: e.op,
                        key: e.key,
                        result: e
                            .result
                            .ok_or(HistoryError::MissingResult { thread: e.thread })?,
                        invoke: inv.time,
                        response: e.time,
                    });
                }
            }
        }
        if let Some(t) = pending.iter().position(Option::is_some) {
            return Err(HistoryError::Incomplete { thread: t });
        }
        ops.sort_by_key(|o| (o.invoke, o.thread));
        Ok(ops)
    }

    /// Builds a history from completed operations.
    pub fn from_operations(initial: Vec<u64>, ops: &[Operation]) -> History {
        let mut ops = ops.to_vec();
        ops.sort_by_key(|o| (o.thread, o.invoke));
        let mut events = Vec::with_capacity(2 * ops.len());
        for o in &ops {
            events.push(HistoryEvent {
                thread: o.thread,
                op: o.op,
                key: o.key,
                phase: Phase::Invoke,
                result: None,
                time: o.invoke,
            });
            events.push(HistoryEvent {
                thread: o.thread,
                op: o.op,
                key: o.key,
                phase: Phase::Response,
                result: Some(o.result),
                time: o.response,
            });
        }
        // Stable, so an operation's invoke stays ahead of a response with the
        // same timestamp.
        events.sort_by_key(|e| e.time);
        History {
            initial,
            events,
            rebuilds: Vec::new(),
        }
    }
}

/// Shape of a recorded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordParams {
    pub threads: usize,
    pub ops_per_thread: usize,
    pub keys: u64,
    pub with_rebuild: bool,
    pub seed: u64,
}

impl RecordParams {
    pub const MAX_THREADS: usize = 4;
    pub const MAX_OPS: usize = 8;
    pub const MAX_KEYS: u64 = 4;

    /// Random parameters within the recording limits.
    pub fn random(seed: u64, with_rebuild: bool) -> RecordParams {
        let mut rng = SmallRng::seed_from_u64(seed);
        RecordParams {
            threads: rng.random_range(2..=Self::MAX_THREADS),
            ops_per_thread: rng.random_range(1..=Self::MAX_OPS),
            keys: rng.random_range(1..=Self::MAX_KEYS),
            with_rebuild,
            seed,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("threads must be in 2..=4, got {0}")]
    Threads(usize),
    #[error("operations per thread must be in 1..=8, got {0}")]
    Ops(usize),
    #[error("key space must be in 1..=4, got {0}")]
    Keys(u64),
}

/// Runs `params.threads` workers, each issuing a short random sequence of
/// operations on a small key space, and records what they observed. With
/// `with_rebuild`, a further thread rebuilds the table until every worker is
/// done. Workers yield at random schedule points to diversify interleavings.
pub fn record_run(params: &RecordParams) -> Result<History, RecordError> {
    if !(2..=RecordParams::MAX_THREADS).contains(&params.threads) {
        return Err(RecordError::Threads(params.threads));
    }
    if !(1..=RecordParams::MAX_OPS).contains(&params.ops_per_thread) {
        return Err(RecordError::Ops(params.ops_per_thread));
    }
    if !(1..=RecordParams::MAX_KEYS).contains(&params.keys) {
        return Err(RecordError::Keys(params.keys));
    }
    let mut rng = SmallRng::seed_from_u64(params.seed);
    let table: DHash<u64> =
        DHash::new(rng.random_range(1..=3), hash::seeded(params.seed)).expect("nonzero buckets");
    let initial: Vec<u64> = (0..params.keys).filter(|_| rng.random_bool(0.5)).collect();
    for &k in &initial {
        table.insert(k, k).expect("fresh key");
    }
    let plans: Vec<Vec<(OpKind, u64)>> = (0..params.threads)
        .map(|_| {
            (0..params.ops_per_thread)
                .map(|_| {
                    let op = match rng.random_range(0..3) {
                        0 => OpKind::Lookup,
                        1 => OpKind::Insert,
                        _ => OpKind::Delete,
                    };
                    (op, rng.random_range(0..params.keys))
                })
                .collect()
        })
        .collect();
    table.set_schedule_hook(Arc::new(|_p: SchedulePoint, _k: u64| {
        if rand::rng().random_bool(0.3) {
            thread::yield_now();
        }
    }));

    let epoch = Instant::now();
    let now = || epoch.elapsed().as_nanos() as u64;
    let done = AtomicBool::new(false);
    let start = Barrier::new(params.threads + usize::from(params.with_rebuild));
    let mut events = Vec::new();
    let mut rebuilds = Vec::new();
    thread::scope(|s| {
        let rebuilder = params.with_rebuild.then(|| {
            let (table, done, start) = (&table, &done, &start);
            let mut rng = SmallRng::seed_from_u64(params.seed ^ 0x5eed);
            s.spawn(move || {
                let mut windows = Vec::new();
                start.wait();
                while !done.load(Ordering::Acquire) {
                    let nb = rng.random_range(1..=4);
                    let h = hash::seeded(rng.random());
                    let t0 = now();
                    table.rebuild(nb, h).expect("sole rebuilder");
                    windows.push(RebuildWindow {
                        start: t0,
                        end: now(),
                    });
                    if rng.random_bool(0.5) {
                        thread::yield_now();
                    }
                }
                windows
            })
        });
        let workers: Vec<_> = plans
            .iter()
            .enumerate()
            .map(|(thread, plan)| {
                let (table, start) = (&table, &start);
                let mut rng = SmallRng::seed_from_u64(params.seed.wrapping_add(thread as u64 + 1));
                s.spawn(move || {
                    reclaim::register_current_thread();
                    let mut log = Vec::with_capacity(2 * plan.len());
                    start.wait();
                    for &(op, key) in plan {
                        if rng.random_bool(0.5) {
                            thread::yield_now();
                        }
                        let invoke = now();
                        let result = match op {
                            OpKind::Lookup => table.contains(key),
                            OpKind::Insert => table.insert(key, key).is_ok(),
                            OpKind::Delete => table.delete(key).is_ok(),
                        };
                        let response = now();
                        log.push(HistoryEvent {
                            thread,
                            op,
                            key,
                            phase: Phase::Invoke,
                            result: None,
                            time: invoke,
                        });
                        log.push(HistoryEvent {
                            thread,
                            op,
                            key,
                            phase: Phase::Response,
                            result: Some(result),
                            time: response,
                        });
                    }
                    reclaim::unregister_current_thread();
                    log
                })
            })
            .collect();
        for w in workers {
            events.extend(w.join().expect("worker panicked"));
        }
        done.store(true, Ordering::Release);
        if let Some(r) = rebuilder {
            rebuilds = r.join().expect("rebuilder panicked");
        }
    });
    table
        .check_invariants()
        .expect("table invariants after recording");
    events.sort_by_key(|e| e.time);
    Ok(History {
        initial,
        events,
        rebuilds,
    })
}
