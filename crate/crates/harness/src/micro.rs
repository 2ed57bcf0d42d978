//! Cost of entering and leaving a read-side critical section, against a
//! baseline that does the same data movement without the reclamation layer:
//! load a shared word and store it into a per-thread word, then clear that
//! word.

use std::cell::Cell;
use std::hint::black_box;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use dhash::reclaim;

static SHARED: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LOCAL: Cell<*const AtomicU64> = const { Cell::new(std::ptr::null()) };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastPath {
    pub iterations: u64,
    pub enter_exit_ns: f64,
    pub baseline_ns: f64,
    pub asymmetric_barrier: bool,
}

impl FastPath {
    pub fn ratio(&self) -> f64 {
        self.enter_exit_ns / self.baseline_ns
    }
}

#[inline(never)]
fn baseline(iters: u64) -> f64 {
    let t0 = Instant::now();
    for _ in 0..iters {
        let v = black_box(&SHARED).load(Ordering::Acquire);
        let word = unsafe { &*LOCAL.with(Cell::get) };
        word.store(v, Ordering::Relaxed);
        word.store(0, Ordering::Release);
    }
    t0.elapsed().as_nanos() as f64 / iters as f64
}

#[inline(never)]
fn enter_exit(iters: u64) -> f64 {
    let t0 = Instant::now();
    for _ in 0..iters {
        drop(reclaim::enter_critical());
    }
    t0.elapsed().as_nanos() as f64 / iters as f64
}

/// Splits `iterations` into `rounds` short interleaved runs of each loop and
/// keeps the fastest of each, so a burst of host noise only spoils the rounds
/// it overlaps.
pub fn reclaim_fast_path(iterations: u64, rounds: usize) -> FastPath {
    reclaim::register_current_thread();
    if LOCAL.with(Cell::get).is_null() {
        let word: &'static AtomicU64 = Box::leak(Box::new(AtomicU64::new(0)));
        LOCAL.with(|l| l.set(black_box(word)));
    }
    let rounds = rounds.max(1);
    let per_round = (iterations / rounds as u64).max(1);
    let (mut e, mut b) = (f64::INFINITY, f64::INFINITY);
    enter_exit(per_round);
    baseline(per_round);
    for _ in 0..rounds {
        e = e.min(enter_exit(per_round));
        b = b.min(baseline(per_round));
    }
    FastPath {
        iterations,
        enter_exit_ns: e,
        baseline_ns: b,
        asymmetric_barrier: reclaim::uses_asymmetric_barrier(),
    }
}
