//! The contract a set algorithm must meet to serve as a DHash bucket.
//!
//! [`DHash`](crate::DHash) only talks to its buckets through [`BucketSet`].
//! Besides find/insert/delete, the rebuild needs two things from a bucket:
//!
//! * A distribution delete that leaves the node alive and hands it back, so the
//!   same node can be linked into the replacement table.
//! * Traversals that are not fooled when such a node is re-threaded into a
//!   different list while they are standing on it. Implementations declare how
//!   they achieve this through [`BucketSet::REDIRECTION`].
//! * A way to close the set against inserts of keys at or below the smallest
//!   live key, so that a bucket being drained front to back cannot receive a
//!   key that may already have moved on.
//!
//! [`conformance`] exercises an implementation against these clauses.

use std::ptr::NonNull;

use crate::list::{
    Deleted, Era, Flag, InsertError, Node, OrderedList, Retire, Search, UnlinkPolicy,
};
use crate::reclaim::Guard;

/// Progress guarantee of the common operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    LockFree,
    WaitFree,
}

/// How traversals survive node reuse by a concurrent rebuild.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Redirection {
    /// Advancing past a node re-reads its successor word and restarts when the
    /// word shows the node has left the list.
    RevalidateSuccessor,
    /// Lists end in sentinels carrying a bucket identity that traversals check.
    BucketSentinel,
}

/// A concurrent ordered set usable as a bucket.
///
/// # Safety
///
/// The table relies on these for memory safety:
///
/// * All methods are safe to call concurrently from threads holding guards.
/// * A node handed to [`Retire`] is unreachable from the set.
/// * `delete(_, IsBeingDistributed)` never retires the node, and on
///   `Surrendered` the node is unreachable from the set.
/// * `insert` leaves the set unchanged on `Err`.
/// * After `close`, an insert succeeds only if some unmarked node with a
///   smaller key is present when it links.
/// * Traversal never reports a false miss because a node it visited was
///   re-inserted into a set of the opposite era.
pub unsafe trait BucketSet<V>: Send + Sync + Sized {
    const PROGRESS: Progress;
    const REDIRECTION: Redirection;

    fn with_era(era: Era) -> Self;

    fn era(&self) -> Era;

    fn find<'g>(&'g self, key: u64, guard: &'g Guard, retire: &dyn Retire<V>) -> Search<'g, V>;

    fn lookup<'g>(
        &'g self,
        key: u64,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Option<&'g Node<V>> {
        let s = self.find(key, guard, retire);
        if s.found {
            s.snapshot.cur
        } else {
            None
        }
    }

    fn insert(
        &self,
        node: NonNull<Node<V>>,
        guard: &Guard,
        retire: &dyn Retire<V>,
    ) -> Result<(), InsertError<V>>;

    fn close(&self);

    fn delete<'g>(
        &'g self,
        key: u64,
        flag: Flag,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Deleted<'g, V>;

    /// Ordered traversal entry point used by the rebuild: the first unmarked
    /// node.
    fn head_cursor<'g>(&'g self, guard: &'g Guard, retire: &dyn Retire<V>) -> Option<&'g Node<V>>;

    /// Calls `f` on every unmarked node in key order. Exact only while no
    /// writer is active.
    fn for_each<'g>(&'g self, guard: &'g Guard, f: &mut dyn FnMut(&'g Node<V>));
}

unsafe impl<V: Send + Sync, P: UnlinkPolicy> BucketSet<V> for OrderedList<V, P> {
    const PROGRESS: Progress = Progress::LockFree;
    const REDIRECTION: Redirection = Redirection::RevalidateSuccessor;

    fn with_era(era: Era) -> Self {
        OrderedList::with_era(era)
    }

    fn era(&self) -> Era {
        OrderedList::era(self)
    }

    fn find<'g>(&'g self, key: u64, guard: &'g Guard, retire: &dyn Retire<V>) -> Search<'g, V> {
        OrderedList::find(self, key, guard, retire)
    }

    fn lookup<'g>(
        &'g self,
        key: u64,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Option<&'g Node<V>> {
        OrderedList::lookup(self, key, guard, retire)
    }

    fn insert(
        &self,
        node: NonNull<Node<V>>,
        guard: &Guard,
        retire: &dyn Retire<V>,
    ) -> Result<(), InsertError<V>> {
        OrderedList::insert(self, node, guard, retire)
    }

    fn close(&self) {
        OrderedList::close(self)
    }

    fn delete<'g>(
        &'g self,
        key: u64,
        flag: Flag,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Deleted<'g, V> {
        OrderedList::delete(self, key, flag, guard, retire)
    }

    fn head_cursor<'g>(&'g self, guard: &'g Guard, retire: &dyn Retire<V>) -> Option<&'g Node<V>> {
        OrderedList::first(self, guard, retire)
    }

    fn for_each<'g>(&'g self, guard: &'g Guard, f: &mut dyn FnMut(&'g Node<V>)) {
        for n in self.iter(guard) {
            f(n)
        }
    }
}

pub mod conformance {
    //! Contract checks for [`BucketSet`] implementations.
    //!
    //! Every clause runs on its own fresh sets and reports independently. The
    //! payload type [`Probe`] counts its drops so reclamation can be observed
    //! without touching freed memory.

    use std::collections::BTreeSet;
    use std::fmt;
    use std::ptr::NonNull;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread;
    use std::time::{Duration, Instant};

    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use super::BucketSet;
    use crate::list::{DeferFree, Deleted, Era, Flag, Node};
    use crate::reclaim::{self, enter_critical};

    /// Payload that records its own destruction.
    pub struct Probe {
        drops: Arc<AtomicUsize>,
    }

    impl Probe {
        pub fn new(drops: &Arc<AtomicUsize>) -> Self {
            Probe {
                drops: drops.clone(),
            }
        }
    }

    impl Drop for Probe {
        fn drop(&mut self) {
            self.drops.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Clause {
        SnapshotContract,
        OracleEquivalence,
        FlagSemantics,
        MarkedInvisible,
        SuspendedOperation,
        ReuseRedirection,
        Closure,
    }

    impl fmt::Display for Clause {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            fmt::Debug::fmt(self, f)
        }
    }

    #[derive(Debug)]
    pub struct ClauseResult {
        pub clause: Clause,
        pub outcome: Result<(), String>,
    }

    #[derive(Debug, Default)]
    pub struct ConformanceReport {
        pub results: Vec<ClauseResult>,
    }

    impl ConformanceReport {
        pub fn passed(&self) -> bool {
            self.results.iter().all(|r| r.outcome.is_ok())
        }

        pub fn failed(&self) -> Vec<Clause> {
            self.results
                .iter()
                .filter(|r| r.outcome.is_err())
                .map(|r| r.clause)
                .collect()
        }

        pub fn outcome(&self, clause: Clause) -> Option<&Result<(), String>> {
            self.results
                .iter()
                .find(|r| r.clause == clause)
                .map(|r| &r.outcome)
        }
    }

    macro_rules! ensure {
        ($cond:expr, $($arg:tt)+) => {
            if !$cond {
                return Err(format!($($arg)+));
            }
        };
    }

    /// Runs every clause against `B`. `ops` sizes the randomized oracle run.
    pub fn conformance_suite<B: BucketSet<Probe> + 'static>(
        ops: usize,
        seed: u64,
    ) -> ConformanceReport {
        let mut report = ConformanceReport::default();
        let mut run = |clause, f: &dyn Fn() -> Result<(), String>| {
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
                .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
            report.results.push(ClauseResult { clause, outcome });
        };
        run(Clause::SnapshotContract, &|| snapshot_contract::<B>(seed));
        run(Clause::OracleEquivalence, &|| {
            oracle_equivalence::<B>(ops, seed)
        });
        run(Clause::FlagSemantics, &|| flag_semantics::<B>());
        run(Clause::MarkedInvisible, &|| marked_invisible::<B>());
        run(Clause::SuspendedOperation, &|| suspended_operation::<B>());
        run(Clause::ReuseRedirection, &|| reuse_redirection::<B>(seed));
        run(Clause::Closure, &|| closure::<B>());
        report
    }

    fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
        p.downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default()
    }

    fn filled<B: BucketSet<Probe>>(
        keys: impl IntoIterator<Item = u64>,
        drops: &Arc<AtomicUsize>,
    ) -> B {
        let set = B::with_era(Era::ZERO);
        let g = enter_critical();
        for k in keys {
            if let Err(e) = set.insert(Node::alloc(k, Probe::new(drops)), &g, &DeferFree) {
                unsafe { Node::free(e.into_node()) };
            }
        }
        set
    }

    fn contents<B: BucketSet<Probe>>(set: &B) -> Vec<u64> {
        let g = enter_critical();
        let mut out = Vec::new();
        set.for_each(&g, &mut |n| out.push(n.key()));
        out
    }

    fn snapshot_contract<B: BucketSet<Probe>>(seed: u64) -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let mut rng = StdRng::seed_from_u64(seed);
        for _ in 0..20 {
            let keys: BTreeSet<u64> = (0..rng.random_range(0..40))
                .map(|_| rng.random_range(0..100))
                .collect();
            let set: B = filled(keys.iter().copied(), &drops);
            let g = enter_critical();
            for probe in 0..102 {
                let s = set.find(probe, &g, &DeferFree);
                let expect = keys.range(probe..).next().copied();
                let got = s.snapshot.cur.map(|n| n.key());
                ensure!(
                    got == expect,
                    "find({probe}) cur={got:?}, expected {expect:?}"
                );
                ensure!(
                    s.found == keys.contains(&probe),
                    "find({probe}) found={}",
                    s.found
                );
                let linked = s.snapshot.prev.load(Ordering::Acquire) & !0b111;
                let cur_addr = s.snapshot.cur.map_or(0, |n| n as *const _ as usize);
                ensure!(
                    linked == cur_addr,
                    "find({probe}): prev does not link to cur"
                );
                if let Some(cur) = s.snapshot.cur {
                    let after = keys.range(cur.key() + 1..).next().copied();
                    ensure!(
                        s.snapshot.next_node().map(|n| n.key()) == after,
                        "find({probe}): next is not cur's successor"
                    );
                }
            }
        }
        Ok(())
    }

    fn oracle_equivalence<B: BucketSet<Probe>>(ops: usize, seed: u64) -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let set = B::with_era(Era::ZERO);
        let mut oracle = BTreeSet::new();
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
        let g = enter_critical();
        for i in 0..ops {
            let k = rng.random_range(0..256u64);
            match rng.random_range(0..3) {
                0 => {
                    let ok = match set.insert(Node::alloc(k, Probe::new(&drops)), &g, &DeferFree) {
                        Ok(()) => true,
                        Err(e) => {
                            unsafe { Node::free(e.into_node()) };
                            false
                        }
                    };
                    ensure!(ok == oracle.insert(k), "op {i}: insert({k}) -> {ok}");
                }
                1 => {
                    let ok = matches!(
                        set.delete(k, Flag::LogicallyRemoved, &g, &DeferFree),
                        Deleted::Removed
                    );
                    ensure!(ok == oracle.remove(&k), "op {i}: delete({k}) -> {ok}");
                }
                _ => {
                    let found = set.lookup(k, &g, &DeferFree).is_some();
                    ensure!(
                        found == oracle.contains(&k),
                        "op {i}: lookup({k}) -> {found}"
                    );
                }
            }
        }
        drop(g);
        let got = contents(&set);
        ensure!(
            got.iter().copied().eq(oracle.iter().copied()),
            "final contents differ"
        );
        Ok(())
    }

    fn flag_semantics<B: BucketSet<Probe>>() -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let set: B = filled([1, 2, 3], &drops);
        let surrendered = {
            let g = enter_critical();
            match set.delete(2, Flag::IsBeingDistributed, &g, &DeferFree) {
                Deleted::Surrendered(n) => {
                    ensure!(n.key() == 2, "surrendered wrong node {}", n.key());
                    ensure!(
                        n.flags().contains(Flag::IsBeingDistributed),
                        "surrendered node lacks the distribution mark"
                    );
                    NonNull::from(n)
                }
                other => return Err(format!("distribution delete returned {other:?}")),
            }
        };
        reclaim::drain();
        ensure!(
            drops.load(Ordering::SeqCst) == 0,
            "distribution delete reclaimed the surrendered node"
        );
        unsafe { Node::free(surrendered) };
        ensure!(contents(&set) == [1, 3], "surrendered node still reachable");

        {
            let g = enter_critical();
            ensure!(
                matches!(
                    set.delete(1, Flag::LogicallyRemoved, &g, &DeferFree),
                    Deleted::Removed
                ),
                "logical delete failed"
            );
            ensure!(
                matches!(
                    set.delete(1, Flag::LogicallyRemoved, &g, &DeferFree),
                    Deleted::NotFound
                ),
                "second delete of the same key succeeded"
            );
        }
        reclaim::drain();
        ensure!(
            drops.load(Ordering::SeqCst) == 2,
            "logically removed node not reclaimed exactly once (drops={})",
            drops.load(Ordering::SeqCst)
        );
        Ok(())
    }

    fn marked_invisible<B: BucketSet<Probe>>() -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let set: B = filled(0..10, &drops);
        let g = enter_critical();
        for k in (0..10).step_by(3) {
            let n = set
                .lookup(k, &g, &DeferFree)
                .ok_or("key missing before marking")?;
            n.set_flag(Flag::LogicallyRemoved);
            ensure!(
                set.lookup(k, &g, &DeferFree).is_none(),
                "marked {k} still returned by lookup"
            );
            ensure!(!set.find(k, &g, &DeferFree).found, "marked {k} still found");
        }
        drop(g);
        ensure!(
            contents(&set) == [1, 2, 4, 5, 7, 8],
            "marked nodes visible to traversal"
        );
        Ok(())
    }

    /// Leaves nodes in the states a thread suspended mid-operation would leave
    /// them in, then requires other threads to finish their operations.
    fn suspended_operation<B: BucketSet<Probe> + 'static>() -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let set: Arc<B> = Arc::new(filled(0..64, &drops));
        let (hazard_node, hazard_key);
        {
            let g = enter_critical();
            // A deleter that marked 10 and stalled before unlinking.
            set.lookup(10, &g, &DeferFree)
                .unwrap()
                .set_flag(Flag::LogicallyRemoved);
            // A rebuilder that marked 20 and stalled mid-distribution.
            let n = set.lookup(20, &g, &DeferFree).unwrap();
            n.set_flag(Flag::IsBeingDistributed);
            hazard_node = NonNull::from(n);
            hazard_key = n.key();
        }
        let workers: Vec<_> = (0..2)
            .map(|t| {
                let set = set.clone();
                let drops = drops.clone();
                thread::spawn(move || {
                    let g = enter_critical();
                    for k in 0..64u64 {
                        let _ = set.lookup(k, &g, &DeferFree);
                        if (k + t) % 4 == 0 {
                            if let Err(e) =
                                set.insert(Node::alloc(k + 100, Probe::new(&drops)), &g, &DeferFree)
                            {
                                unsafe { Node::free(e.into_node()) };
                            }
                        }
                        if k % 7 == t {
                            let _ = set.delete(k, Flag::LogicallyRemoved, &g, &DeferFree);
                        }
                    }
                })
            })
            .collect();
        let deadline = Instant::now() + Duration::from_secs(20);
        for w in workers {
            while !w.is_finished() {
                ensure!(
                    Instant::now() < deadline,
                    "operations blocked behind a suspended thread"
                );
                thread::sleep(Duration::from_millis(1));
            }
            w.join().map_err(|_| "worker panicked".to_string())?;
        }
        {
            let g = enter_critical();
            ensure!(
                set.lookup(10, &g, &DeferFree).is_none(),
                "suspended delete resurfaced"
            );
            ensure!(
                set.lookup(hazard_key, &g, &DeferFree).is_none(),
                "distributed node visible"
            );
            // A search past the distributed node guarantees it is unlinked.
            let _ = set.find(hazard_key + 1, &g, &DeferFree);
        }
        reclaim::drain();
        ensure!(
            drops.load(Ordering::SeqCst) > 0,
            "logically removed nodes were never reclaimed"
        );
        let before = drops.load(Ordering::SeqCst);
        unsafe { Node::free(hazard_node) };
        ensure!(
            drops.load(Ordering::SeqCst) == before + 1,
            "distributed node was reclaimed by the set"
        );
        Ok(())
    }

    fn closure<B: BucketSet<Probe>>() -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let set: B = filled([10, 20], &drops);
        set.close();
        let g = enter_critical();
        let try_insert = |k| match set.insert(Node::alloc(k, Probe::new(&drops)), &g, &DeferFree) {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = format!("{e:?}");
                unsafe { Node::free(e.into_node()) };
                Err(msg)
            }
        };
        ensure!(
            try_insert(5) == Err("Closed".into()),
            "closed set accepted a head insert"
        );
        ensure!(
            try_insert(15).is_ok(),
            "closed set refused an insert behind a live node"
        );
        ensure!(
            try_insert(20) == Err("Exists".into()),
            "duplicate on a closed set not reported"
        );
        ensure!(
            matches!(
                set.delete(10, Flag::LogicallyRemoved, &g, &DeferFree),
                Deleted::Removed
            ),
            "delete on a closed set failed"
        );
        ensure!(
            try_insert(12) == Err("Closed".into()),
            "closed head reopened by an unlink"
        );
        drop(g);
        ensure!(contents(&set) == [15, 20], "closure changed membership");
        Ok(())
    }

    /// A reader scans for the last key of one set while another thread moves
    /// every other node, in order, into a set of the opposite era.
    fn reuse_redirection<B: BucketSet<Probe> + 'static>(seed: u64) -> Result<(), String> {
        let drops = Arc::new(AtomicUsize::new(0));
        let mut rng = StdRng::seed_from_u64(seed ^ 0xfeed);
        for round in 0..30 {
            let n = rng.random_range(8..64u64);
            let from: Arc<B> = Arc::new(filled(0..=n, &drops));
            let to: Arc<B> = Arc::new(B::with_era(Era::ZERO.flip()));
            let stop = Arc::new(AtomicBool::new(false));
            let reader = {
                let (from, stop) = (from.clone(), stop.clone());
                thread::spawn(move || {
                    let mut misses = 0u64;
                    while !stop.load(Ordering::Acquire) {
                        let g = enter_critical();
                        if from.lookup(n, &g, &DeferFree).is_none() {
                            misses += 1;
                        }
                        drop(g);
                    }
                    misses
                })
            };
            for k in 0..n {
                let g = enter_critical();
                match from.delete(k, Flag::IsBeingDistributed, &g, &DeferFree) {
                    Deleted::Surrendered(node) => {
                        node.prepare_for(to.era());
                        if let Err(e) = to.insert(NonNull::from(node), &g, &DeferFree) {
                            return Err(format!("round {round}: reinsert of {k} refused: {e:?}"));
                        }
                    }
                    other => {
                        return Err(format!("round {round}: distribution of {k} gave {other:?}"))
                    }
                }
                drop(g);
                thread::yield_now();
            }
            stop.store(true, Ordering::Release);
            let misses = reader.join().map_err(|_| "reader panicked".to_string())?;
            ensure!(
                misses == 0,
                "round {round}: {misses} false misses after node reuse"
            );
            ensure!(
                contents(&*to).len() as u64 == n,
                "round {round}: moved nodes lost"
            );
        }
        Ok(())
    }
}
