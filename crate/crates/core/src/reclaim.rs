//! Deferred reclamation with read-side critical sections.
//!
//! Readers bracket every access to shared nodes with [`enter_critical`] and the
//! returned [`Guard`]. Writers unlink a node, hand it to [`defer_free`], and the
//! reclamation action runs only after every critical section that was active at
//! that moment has ended. [`wait_for_readers`] is the blocking form of the same
//! barrier.
//!
//! Each registered thread owns a slot holding the global epoch it observed when
//! its outermost critical section began, or zero while it is outside one. A
//! grace period bumps the global epoch and waits until every slot is either
//! zero or at least the new epoch.
//!
//! The reader fast path is one acquire load of the global epoch plus a relaxed
//! store on entry and one release store on exit. The store-load ordering a
//! reader would otherwise need (announce, then load shared pointers) is
//! supplied by the writer through a process-wide barrier (`membarrier(2)` with
//! `MEMBARRIER_CMD_PRIVATE_EXPEDITED`). Where that syscall is missing, or when
//! the `strict-fences` feature is on, readers issue a `SeqCst` fence instead.
//!
//! Threads register lazily on first use and unregister when they exit. A
//! registered thread that is outside every critical section never delays a
//! grace period.

use std::cell::Cell;
use std::marker::PhantomData;
use std::mem;
use std::ptr;
use std::sync::atomic::{compiler_fence, fence, AtomicBool, AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, Once};
use std::thread;
use std::time::Duration;

use crossbeam_utils::{Backoff, CachePadded};

/// Number of deferred actions a thread buffers before sealing them into the
/// global queue and attempting a non-blocking collection.
const SEAL_THRESHOLD: usize = 256;

/// A reclamation action: `action(target)` runs once after a grace period.
pub struct Deferred {
    target: *mut u8,
    action: unsafe fn(*mut u8),
}

// Deferred actions are created on one thread and executed on another.
unsafe impl Send for Deferred {}

impl Deferred {
    fn run(self) {
        unsafe { (self.action)(self.target) }
    }
}

struct Sealed {
    epoch: u64,
    items: Vec<Deferred>,
}

const NEST_BITS: u32 = 16;
const NEST_MASK: u64 = (1 << NEST_BITS) - 1;

#[repr(align(128))]
struct Slot {
    /// Zero outside critical sections. Inside, the epoch read at entry
    /// shifted left by `NEST_BITS`, plus the number of live guards. Only the
    /// owning thread writes it.
    active: AtomicU64,
    in_use: AtomicBool,
    pending: Mutex<Vec<Deferred>>,
}

struct Domain {
    epoch: CachePadded<AtomicU64>,
    slots: Mutex<Vec<&'static Slot>>,
    sealed: Mutex<Vec<Sealed>>,
    deferred: AtomicU64,
    executed: AtomicU64,
    grace_periods: AtomicU64,
}

static DOMAIN: Domain = Domain {
    epoch: CachePadded::new(AtomicU64::new(1)),
    slots: Mutex::new(Vec::new()),
    sealed: Mutex::new(Vec::new()),
    deferred: AtomicU64::new(0),
    executed: AtomicU64::new(0),
    grace_periods: AtomicU64::new(0),
};

static BARRIER_INIT: Once = Once::new();
static ASYMMETRIC: AtomicBool = AtomicBool::new(false);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // Deferred actions never run under these locks, so poisoning only means a
    // panicking test thread; the protected data stays consistent.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct ThreadState {
    slot: Cell<*const Slot>,
}

thread_local! {
    static STATE: ThreadState = const {
        ThreadState { slot: Cell::new(ptr::null()) }
    };
    static OWNER: Registration = const { Registration { _p: () } };
}

/// Unregisters the thread's slot when the thread exits.
struct Registration {
    _p: (),
}

impl Drop for Registration {
    fn drop(&mut self) {
        let _ = STATE.try_with(|s| release_slot(s));
    }
}

#[cfg(target_os = "linux")]
mod membarrier {
    const CMD_QUERY: libc::c_long = 0;
    const CMD_PRIVATE_EXPEDITED: libc::c_long = 1 << 3;
    const CMD_REGISTER_PRIVATE_EXPEDITED: libc::c_long = 1 << 4;

    fn call(cmd: libc::c_long) -> libc::c_long {
        unsafe {
            libc::syscall(
                libc::SYS_membarrier,
                cmd,
                0 as libc::c_long,
                0 as libc::c_long,
            )
        }
    }

    pub fn register() -> bool {
        let mask = call(CMD_QUERY);
        if mask < 0 || mask & CMD_PRIVATE_EXPEDITED == 0 {
            return false;
        }
        call(CMD_REGISTER_PRIVATE_EXPEDITED) == 0
    }

    pub fn heavy() {
        let r = call(CMD_PRIVATE_EXPEDITED);
        assert_eq!(r, 0, "membarrier failed after successful registration");
    }
}

#[cfg(not(target_os = "linux"))]
mod membarrier {
    pub fn register() -> bool {
        false
    }
    pub fn heavy() {}
}

fn init_barrier() {
    BARRIER_INIT.call_once(|| {
        let ok = !cfg!(feature = "strict-fences") && !cfg!(miri) && membarrier::register();
        ASYMMETRIC.store(ok, Ordering::Relaxed);
    });
}

/// Reader-side half of the asymmetric barrier pair.
#[inline(always)]
fn light_barrier() {
    if ASYMMETRIC.load(Ordering::Relaxed) {
        compiler_fence(Ordering::SeqCst);
    } else {
        fence(Ordering::SeqCst);
    }
}

/// Writer-side half: orders every running reader as if it had executed a full
/// fence at some point during this call.
fn heavy_barrier() {
    fence(Ordering::SeqCst);
    if ASYMMETRIC.load(Ordering::Relaxed) {
        membarrier::heavy();
    }
}

#[cold]
fn acquire_slot(state: &ThreadState) -> &'static Slot {
    init_barrier();
    OWNER.with(|_| ());
    let mut slots = lock(&DOMAIN.slots);
    let slot = match slots.iter().find(|s| {
        s.in_use
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
            .is_ok()
    }) {
        Some(s) => *s,
        None => {
            let s: &'static Slot = Box::leak(Box::new(Slot {
                active: AtomicU64::new(0),
                in_use: AtomicBool::new(true),
                pending: Mutex::new(Vec::new()),
            }));
            slots.push(s);
            s
        }
    };
    state.slot.set(slot);
    slot
}

fn release_slot(state: &ThreadState) {
    let slot = state.slot.replace(ptr::null());
    if slot.is_null() {
        return;
    }
    let slot = unsafe { &*slot };
    debug_assert_eq!(
        slot.active.load(Ordering::Relaxed),
        0,
        "thread exited inside a critical section"
    );
    slot.active.store(0, Ordering::Release);
    seal(slot);
    slot.in_use.store(false, Ordering::Release);
}

#[inline]
fn current_slot(state: &ThreadState) -> &'static Slot {
    let slot = state.slot.get();
    if slot.is_null() {
        acquire_slot(state)
    } else {
        unsafe { &*slot }
    }
}

/// Registers the calling thread with the reclamation domain. Idempotent.
///
/// Registration also happens implicitly on first use; calling this up front
/// keeps the slow path out of measured loops.
pub fn register_current_thread() {
    STATE.with(|s| {
        current_slot(s);
    });
}

/// Releases the calling thread's slot. Pending deferred actions are handed to
/// the global queue. Panics if called inside a critical section.
pub fn unregister_current_thread() {
    STATE.with(|s| {
        assert!(!holds_guard(s), "unregister inside a critical section");
        release_slot(s);
    });
}

/// An active read-side critical section.
///
/// Node references loaded while a guard is alive stay valid until it is
/// dropped. Guards nest; protection lasts until the outermost one is released.
/// A guard cannot leave its thread.
pub struct Guard {
    slot: *const Slot,
    _not_send: PhantomData<*mut ()>,
}

/// Enters a read-side critical section.
#[inline]
pub fn enter_critical() -> Guard {
    STATE.with(|s| {
        let slot = current_slot(s);
        let word = slot.active.load(Ordering::Relaxed);
        if word == 0 {
            let epoch = DOMAIN.epoch.load(Ordering::Acquire);
            slot.active.store(epoch << NEST_BITS | 1, Ordering::Relaxed);
            light_barrier();
        } else {
            assert!(
                word & NEST_MASK != NEST_MASK,
                "critical sections nested too deeply"
            );
            slot.active.store(word + 1, Ordering::Relaxed);
        }
        Guard {
            slot,
            _not_send: PhantomData,
        }
    })
}

/// Leaves a critical section. Equivalent to dropping the guard.
#[inline]
pub fn exit_critical(guard: Guard) {
    drop(guard);
}

impl Drop for Guard {
    #[inline]
    fn drop(&mut self) {
        // The slot stays owned by this thread while any guard is live, since
        // the guard is neither Send nor outlives the thread's registration.
        let slot = unsafe { &*self.slot };
        let word = slot.active.load(Ordering::Relaxed);
        debug_assert!(word & NEST_MASK > 0, "guard released twice");
        if word & NEST_MASK == 1 {
            slot.active.store(0, Ordering::Release);
        } else {
            slot.active.store(word - 1, Ordering::Relaxed);
        }
    }
}

/// True if the calling thread holds a guard.
pub fn in_critical_section() -> bool {
    STATE.with(holds_guard)
}

fn holds_guard(state: &ThreadState) -> bool {
    let slot = state.slot.get();
    !slot.is_null() && unsafe { &*slot }.active.load(Ordering::Relaxed) != 0
}

fn backoff_wait(backoff: &Backoff, rounds: &mut u32) {
    if backoff.is_completed() {
        *rounds += 1;
        if *rounds > 64 {
            thread::sleep(Duration::from_micros(50));
        } else {
            thread::yield_now();
        }
    } else {
        backoff.snooze();
    }
}

fn start_grace_period() -> u64 {
    let target = DOMAIN.epoch.fetch_add(1, Ordering::SeqCst) + 1;
    heavy_barrier();
    target
}

fn wait_epoch(target: u64) {
    let slots: Vec<&'static Slot> = lock(&DOMAIN.slots).clone();
    for slot in slots {
        let backoff = Backoff::new();
        let mut rounds = 0;
        loop {
            let seen = slot.active.load(Ordering::Acquire) >> NEST_BITS;
            if seen == 0 || seen >= target {
                break;
            }
            backoff_wait(&backoff, &mut rounds);
        }
    }
    fence(Ordering::SeqCst);
    DOMAIN.grace_periods.fetch_add(1, Ordering::Relaxed);
}

/// Blocks until every critical section active at the time of the call has
/// ended, then runs the deferred actions that became safe.
///
/// # Panics
///
/// Panics when called from inside a critical section, which would otherwise
/// deadlock.
pub fn wait_for_readers() {
    assert!(
        !in_critical_section(),
        "wait_for_readers called inside a read-side critical section"
    );
    register_current_thread();
    let target = start_grace_period();
    wait_epoch(target);
    run_ready(target);
}

/// Schedules `action(target)` to run after a grace period. Never blocks on
/// readers and may be called inside a critical section.
///
/// # Safety
///
/// `target` must already be unreachable from every shared entry point, and
/// `action` must be sound to call exactly once on it from any thread.
pub unsafe fn defer_free(target: *mut u8, action: unsafe fn(*mut u8)) {
    DOMAIN.deferred.fetch_add(1, Ordering::Relaxed);
    let full = STATE.with(|s| {
        let slot = current_slot(s);
        let mut pending = lock(&slot.pending);
        pending.push(Deferred { target, action });
        (pending.len() >= SEAL_THRESHOLD).then_some(slot)
    });
    if let Some(slot) = full {
        seal(slot);
        try_collect();
    }
}

/// Typed convenience over [`defer_free`] for boxed values.
///
/// # Safety
///
/// Same contract as [`defer_free`]; `ptr` must come from `Box::into_raw`.
pub unsafe fn defer_drop<T: Send + 'static>(ptr: *mut T) {
    unsafe fn drop_box<T>(p: *mut u8) {
        drop(unsafe { Box::from_raw(p as *mut T) });
    }
    unsafe { defer_free(ptr as *mut u8, drop_box::<T>) }
}

fn seal(slot: &Slot) {
    let items = mem::take(&mut *lock(&slot.pending));
    if items.is_empty() {
        return;
    }
    // The epoch bump orders every unlink that preceded the deferral before
    // any reader that observes the new epoch.
    let epoch = DOMAIN.epoch.fetch_add(1, Ordering::SeqCst) + 1;
    lock(&DOMAIN.sealed).push(Sealed { epoch, items });
}

/// Non-blocking collection: frees every sealed batch whose epoch is not newer
/// than the oldest active reader.
fn try_collect() {
    heavy_barrier();
    let mut oldest = u64::MAX;
    for slot in lock(&DOMAIN.slots).iter() {
        let seen = slot.active.load(Ordering::Acquire) >> NEST_BITS;
        if seen != 0 {
            oldest = oldest.min(seen);
        }
    }
    fence(Ordering::SeqCst);
    run_ready(oldest);
}

fn run_ready(bound: u64) {
    let ready: Vec<Sealed> = {
        let mut sealed = lock(&DOMAIN.sealed);
        let (ready, rest): (Vec<_>, Vec<_>) = sealed.drain(..).partition(|b| b.epoch <= bound);
        *sealed = rest;
        ready
    };
    let mut n = 0;
    for batch in ready {
        for item in batch.items {
            item.run();
            n += 1;
        }
    }
    DOMAIN.executed.fetch_add(n, Ordering::Relaxed);
}

/// Runs every pending deferred action from every thread.
///
/// Actions that defer further work are followed until nothing is pending.
/// The caller must not be inside a critical section.
pub fn drain() {
    assert!(
        !in_critical_section(),
        "drain called inside a critical section"
    );
    loop {
        let slots: Vec<&'static Slot> = lock(&DOMAIN.slots).clone();
        for slot in &slots {
            seal(slot);
        }
        if lock(&DOMAIN.sealed).is_empty() {
            return;
        }
        wait_for_readers();
    }
}

/// Counters for the allocation oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stats {
    pub deferred: u64,
    pub executed: u64,
    pub grace_periods: u64,
}

pub fn stats() -> Stats {
    Stats {
        deferred: DOMAIN.deferred.load(Ordering::Relaxed),
        executed: DOMAIN.executed.load(Ordering::Relaxed),
        grace_periods: DOMAIN.grace_periods.load(Ordering::Relaxed),
    }
}

/// True when readers rely on the process-wide barrier rather than a fence.
pub fn uses_asymmetric_barrier() -> bool {
    init_barrier();
    ASYMMETRIC.load(Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::{Arc, Barrier};

    struct Flag(Arc<AtomicUsize>);

    impl Drop for Flag {
        fn drop(&mut self) {
            self.0.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn deferred_flag(counter: &Arc<AtomicUsize>) {
        let p = Box::into_raw(Box::new(Flag(counter.clone())));
        unsafe { defer_drop(p) };
    }

    #[test]
    fn empty_critical_section() {
        let g = enter_critical();
        assert!(in_critical_section());
        exit_critical(g);
        assert!(!in_critical_section());
    }

    #[test]
    fn nesting_holds_until_outermost_exit() {
        let outer = enter_critical();
        let inner = enter_critical();
        drop(inner);
        assert!(in_critical_section());
        let slot = STATE.with(|s| s.slot.get());
        assert_ne!(unsafe { &*slot }.active.load(Ordering::Relaxed), 0);
        drop(outer);
        assert!(!in_critical_section());
        assert_eq!(unsafe { &*slot }.active.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn wait_without_readers_returns() {
        wait_for_readers();
        wait_for_readers();
    }

    #[test]
    #[should_panic(expected = "inside a read-side critical section")]
    fn wait_inside_critical_section_panics() {
        let _g = enter_critical();
        wait_for_readers();
    }

    #[test]
    fn wait_blocks_on_active_reader() {
        let entered = Arc::new(Barrier::new(2));
        let released = Arc::new(AtomicBool::new(false));
        let reader = {
            let entered = entered.clone();
            let released = released.clone();
            thread::spawn(move || {
                let g = enter_critical();
                entered.wait();
                thread::sleep(Duration::from_millis(100));
                released.store(true, Ordering::SeqCst);
                drop(g);
            })
        };
        entered.wait();
        wait_for_readers();
        assert!(
            released.load(Ordering::SeqCst),
            "grace period ended before reader exit"
        );
        reader.join().unwrap();
    }

    #[test]
    fn deferred_action_waits_for_reader() {
        let counter = Arc::new(AtomicUsize::new(0));
        let entered = Arc::new(Barrier::new(2));
        let go = Arc::new(Barrier::new(2));
        let reader = {
            let (entered, go, counter) = (entered.clone(), go.clone(), counter.clone());
            thread::spawn(move || {
                let g = enter_critical();
                entered.wait();
                go.wait();
                // Other threads may be draining; the action must not have run.
                for _ in 0..20 {
                    assert_eq!(counter.load(Ordering::SeqCst), 0);
                    thread::sleep(Duration::from_millis(2));
                }
                drop(g);
            })
        };
        entered.wait();
        deferred_flag(&counter);
        let drainer = thread::spawn(drain);
        go.wait();
        reader.join().unwrap();
        drainer.join().unwrap();
        assert_eq!(counter.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn drain_runs_each_action_once() {
        let counter = Arc::new(AtomicUsize::new(0));
        deferred_flag(&counter);
        drain();
        assert_eq!(counter.load(Ordering::SeqCst), 1);
        drain();
        assert_eq!(counter.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn drain_collects_from_many_threads() {
        let counter = Arc::new(AtomicUsize::new(0));
        let barrier = Arc::new(Barrier::new(5));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (c, b) = (counter.clone(), barrier.clone());
                thread::spawn(move || {
                    for _ in 0..1000 {
                        deferred_flag(&c);
                    }
                    b.wait();
                    // Keep the thread alive so its unsealed batch is still
                    // owned by a live slot while draining.
                    b.wait();
                })
            })
            .collect();
        barrier.wait();
        drain();
        assert_eq!(counter.load(Ordering::SeqCst), 4000);
        barrier.wait();
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn many_deferred_nodes_are_all_reclaimed() {
        let counter = Arc::new(AtomicUsize::new(0));
        for _ in 0..100_000 {
            let g = enter_critical();
            deferred_flag(&counter);
            drop(g);
        }
        drain();
        assert_eq!(counter.load(Ordering::SeqCst), 100_000);
    }

    #[test]
    fn wait_publishes_reader_prior_stores() {
        let data = Arc::new(AtomicU64::new(0));
        let reader_in = Arc::new(Barrier::new(2));
        let h = {
            let (data, reader_in) = (data.clone(), reader_in.clone());
            thread::spawn(move || {
                data.store(42, Ordering::Relaxed);
                let g = enter_critical();
                reader_in.wait();
                drop(g);
            })
        };
        reader_in.wait();
        wait_for_readers();
        assert_eq!(data.load(Ordering::Relaxed), 42);
        h.join().unwrap();
    }

    #[test]
    fn exited_threads_do_not_block_grace_periods() {
        for _ in 0..8 {
            thread::spawn(|| {
                let _g = enter_critical();
            })
            .join()
            .unwrap();
        }
        wait_for_readers();
    }
}
