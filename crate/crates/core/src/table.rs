//! The DHash table: lookup, insert and delete that stay correct while the hash
//! function and bucket count are being replaced.
//!
//! A rebuild publishes an empty replacement table through the old table's
//! `ht_new` link, waits for operations that missed the link, then moves every
//! node into the replacement one at a time. A node between its two buckets is
//! reachable only through the coordinator's `rebuild_cur`; operations consult
//! the old bucket, then `rebuild_cur`, then the new bucket, in that order,
//! while the rebuilder publishes `rebuild_cur`, unlinks, relinks and clears it
//! in the opposite order.
//!
//! Before a bucket is drained it is closed: from then on it accepts no insert
//! at its head, so an insert either lands behind a node the rebuilder has yet
//! to move or goes to the new table after checking that the key has not
//! already moved.
//!
//! While a rebuild is in progress, nodes retired by any operation are parked
//! in the coordinator's graveyard instead of the reclamation queue. They are
//! released only after the grace period that follows installation, since a
//! parked node may still be the target of `rebuild_cur`.

use std::fmt;
use std::marker::PhantomData;
use std::mem;
use std::ptr::{self, NonNull};
use std::sync::atomic::{fence, AtomicPtr, Ordering};
use std::sync::{Mutex, MutexGuard, TryLockError};

#[cfg(feature = "schedule-points")]
use std::sync::{Arc, OnceLock};

use crate::bucket::BucketSet;
use crate::error::Error;
use crate::hash::HashFn;
use crate::list::{Deleted, Era, Flag, InsertError, LfList, Node, Retire};
use crate::reclaim::{self, enter_critical, Guard};
#[cfg(feature = "schedule-points")]
use crate::schedule::{ScheduleHook, SchedulePoint};

macro_rules! point {
    ($table:expr, $point:ident, $key:expr) => {
        #[cfg(feature = "schedule-points")]
        $table.schedule(SchedulePoint::$point, $key);
    };
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct Table<V, B> {
    ht_new: AtomicPtr<Table<V, B>>,
    hash: HashFn,
    buckets: Box<[B]>,
    era: Era,
    _marker: PhantomData<fn() -> V>,
}

impl<V, B: BucketSet<V>> Table<V, B> {
    fn alloc(nbuckets: usize, hash: HashFn, era: Era) -> *mut Self {
        let buckets = (0..nbuckets).map(|_| B::with_era(era)).collect();
        Box::into_raw(Box::new(Table {
            ht_new: AtomicPtr::new(ptr::null_mut()),
            hash,
            buckets,
            era,
            _marker: PhantomData,
        }))
    }

    #[inline]
    fn index(&self, key: u64) -> usize {
        ((self.hash)(key) % self.buckets.len() as u64) as usize
    }

    #[inline]
    fn bucket(&self, key: u64) -> &B {
        &self.buckets[self.index(key)]
    }

    fn count(&self, guard: &Guard) -> usize {
        let mut n = 0;
        for b in self.buckets.iter() {
            b.for_each(guard, &mut |_| n += 1);
        }
        n
    }
}

struct Grave<V>(NonNull<Node<V>>);

// Parked nodes are only released by the rebuilder after a grace period.
unsafe impl<V: Send> Send for Grave<V> {}

type Graveyard<V> = Mutex<Vec<Grave<V>>>;

type Trigger = Box<dyn Fn(&RebuildRequest<'_>) -> bool + Send + Sync>;

struct Coordinator<V> {
    rebuild_cur: AtomicPtr<Node<V>>,
    lock: Mutex<()>,
    trigger: Mutex<Option<Trigger>>,
    graveyard: Graveyard<V>,
}

/// Retirement for operations: parks nodes while the operation's table has a
/// replacement in flight.
struct OpRetire<'a, V, B> {
    table: &'a Table<V, B>,
    graveyard: &'a Graveyard<V>,
}

impl<V: Send + 'static, B> Retire<V> for OpRetire<'_, V, B> {
    fn retire(&self, node: NonNull<Node<V>>) {
        if self.table.ht_new.load(Ordering::Acquire).is_null() {
            unsafe { reclaim::defer_drop(node.as_ptr()) }
        } else {
            lock(self.graveyard).push(Grave(node));
        }
    }
}

/// Retirement for the rebuilder: always parks.
struct Park<'a, V>(&'a Graveyard<V>);

impl<V> Retire<V> for Park<'_, V> {
    fn retire(&self, node: NonNull<Node<V>>) {
        lock(self.0).push(Grave(node));
    }
}

/// What a rebuild trigger sees.
pub struct RebuildRequest<'a> {
    pub current_buckets: usize,
    pub requested_buckets: usize,
    census: &'a dyn Fn() -> usize,
}

impl RebuildRequest<'_> {
    /// Number of keys in the table. Computed on each call by a full traversal.
    pub fn len(&self) -> usize {
        (self.census)()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_factor(&self) -> f64 {
        self.len() as f64 / self.current_buckets as f64
    }
}

/// Counts from one completed rebuild.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RebuildStats {
    /// Nodes moved into the new table.
    pub distributed: usize,
    /// Nodes deleted by other threads before they could be moved.
    pub skipped: usize,
    /// Moved nodes discarded because the new table already held the key.
    pub dropped: usize,
}

/// A concurrent hash set of `u64` keys with attached values, whose hash
/// function can be replaced while in use.
///
/// Progress of lookup, insert and delete is that of the bucket set `B`
/// (lock-free for the shipped list). [`DHash::rebuild`] blocks on grace
/// periods.
pub struct DHash<V, B: BucketSet<V> = LfList<V>> {
    current: AtomicPtr<Table<V, B>>,
    coord: Coordinator<V>,
    #[cfg(feature = "schedule-points")]
    hook: OnceLock<Arc<dyn ScheduleHook>>,
    _marker: PhantomData<Box<Node<V>>>,
}

impl<V, B: BucketSet<V>> fmt::Debug for DHash<V, B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DHash").finish_non_exhaustive()
    }
}

impl<V: Send + Sync + 'static, B: BucketSet<V>> DHash<V, B> {
    pub fn new(nbuckets: usize, hash: HashFn) -> Result<Self, Error> {
        if nbuckets == 0 {
            return Err(Error::ZeroBuckets);
        }
        Ok(DHash {
            current: AtomicPtr::new(Table::alloc(nbuckets, hash, Era::ZERO)),
            coord: Coordinator {
                rebuild_cur: AtomicPtr::new(ptr::null_mut()),
                lock: Mutex::new(()),
                trigger: Mutex::new(None),
                graveyard: Mutex::new(Vec::new()),
            },
            #[cfg(feature = "schedule-points")]
            hook: OnceLock::new(),
            _marker: PhantomData,
        })
    }

    #[inline]
    fn table<'g>(&'g self, _guard: &'g Guard) -> &'g Table<V, B> {
        unsafe { &*self.current.load(Ordering::Acquire) }
    }

    #[inline]
    fn retirer<'a>(&'a self, t: &'a Table<V, B>) -> OpRetire<'a, V, B> {
        OpRetire {
            table: t,
            graveyard: &self.coord.graveyard,
        }
    }

    #[inline]
    fn rebuild_cur<'g>(&'g self, _guard: &'g Guard) -> Option<&'g Node<V>> {
        unsafe { self.coord.rebuild_cur.load(Ordering::Acquire).as_ref() }
    }

    #[cfg(feature = "schedule-points")]
    fn schedule(&self, point: SchedulePoint, key: u64) {
        if let Some(h) = self.hook.get() {
            h.at(point, key);
        }
    }

    /// Installs a hook called at every schedule point. Only one hook can be
    /// installed per table; returns false if one already is.
    #[cfg(feature = "schedule-points")]
    pub fn set_schedule_hook(&self, hook: Arc<dyn ScheduleHook>) -> bool {
        self.hook.set(hook).is_ok()
    }

    /// Finds the live node for `key`. The reference is valid while `guard` is.
    pub fn lookup<'g>(&'g self, key: u64, guard: &'g Guard) -> Option<&'g Node<V>> {
        let t = self.table(guard);
        let retire = self.retirer(t);
        if let Some(n) = t.bucket(key).lookup(key, guard, &retire) {
            return Some(n);
        }
        point!(self, LookupAfterOldFind, key);
        let new = unsafe { t.ht_new.load(Ordering::Acquire).as_ref() }?;
        fence(Ordering::Acquire);
        if let Some(cur) = self.rebuild_cur(guard) {
            if cur.key() == key && !cur.is_logically_removed() {
                return Some(cur);
            }
        }
        point!(self, LookupAfterCurCheck, key);
        fence(Ordering::Acquire);
        let found = new.bucket(key).lookup(key, guard, &retire);
        point!(self, LookupAfterNewFind, key);
        found
    }

    pub fn contains(&self, key: u64) -> bool {
        let g = enter_critical();
        self.lookup(key, &g).is_some()
    }

    pub fn get(&self, key: u64) -> Option<V>
    where
        V: Clone,
    {
        self.guarded_read(key, V::clone).ok()
    }

    /// Runs `f` on the value stored under `key` inside a critical section.
    /// `f` must not wait for readers or start a rebuild.
    pub fn guarded_read<R>(&self, key: u64, f: impl FnOnce(&V) -> R) -> Result<R, Error> {
        let g = enter_critical();
        let node = self.lookup(key, &g).ok_or(Error::NotFound)?;
        Ok(f(node.value()))
    }

    pub fn insert(&self, key: u64, value: V) -> Result<(), Error> {
        let g = enter_critical();
        let t = self.table(&g);
        let retire = self.retirer(t);
        let node = match t.bucket(key).insert(Node::alloc(key, value), &g, &retire) {
            Ok(()) => return Ok(()),
            Err(InsertError::Exists(n)) => {
                unsafe { Node::free(n) };
                return Err(Error::Exists);
            }
            Err(InsertError::Closed(n)) => n,
        };
        // The old bucket is being drained, so the key may be in flight or
        // already moved.
        point!(self, InsertAfterOldInsert, key);
        let new = unsafe { t.ht_new.load(Ordering::Acquire).as_ref() }
            .expect("closed bucket without a rebuild");
        fence(Ordering::Acquire);
        if let Some(cur) = self.rebuild_cur(&g) {
            if cur.key() == key && !cur.is_logically_removed() {
                unsafe { Node::free(node) };
                return Err(Error::Exists);
            }
        }
        point!(self, InsertAfterCurCheck, key);
        fence(Ordering::Acquire);
        let r = match new.bucket(key).insert(node, &g, &retire) {
            Ok(()) => Ok(()),
            Err(e) => {
                unsafe { Node::free(e.into_node()) };
                Err(Error::Exists)
            }
        };
        point!(self, InsertAfterNewInsert, key);
        r
    }

    pub fn delete(&self, key: u64) -> Result<(), Error> {
        let g = enter_critical();
        let t = self.table(&g);
        let retire = self.retirer(t);
        if let Deleted::Removed = t
            .bucket(key)
            .delete(key, Flag::LogicallyRemoved, &g, &retire)
        {
            return Ok(());
        }
        point!(self, DeleteAfterOldDelete, key);
        let new = unsafe { t.ht_new.load(Ordering::Acquire).as_ref() }.ok_or(Error::NotFound)?;
        fence(Ordering::Acquire);
        if let Some(cur) = self.rebuild_cur(&g) {
            // Only the caller that flips the bit owns the deletion; a node
            // already removed may have been succeeded by a fresh insert.
            if cur.key() == key
                && !cur
                    .set_flag(Flag::LogicallyRemoved)
                    .contains(Flag::LogicallyRemoved)
            {
                return Ok(());
            }
        }
        point!(self, DeleteAfterCurCheck, key);
        fence(Ordering::Acquire);
        let r = match new
            .bucket(key)
            .delete(key, Flag::LogicallyRemoved, &g, &retire)
        {
            Deleted::Removed => Ok(()),
            _ => Err(Error::NotFound),
        };
        point!(self, DeleteAfterNewDelete, key);
        r
    }

    /// Installs the predicate consulted by [`DHash::rebuild`] under the
    /// rebuild lock. Without one, every rebuild proceeds.
    pub fn set_rebuild_trigger(
        &self,
        trigger: impl Fn(&RebuildRequest<'_>) -> bool + Send + Sync + 'static,
    ) {
        *lock(&self.coord.trigger) = Some(Box::new(trigger));
    }

    pub fn clear_rebuild_trigger(&self) {
        *lock(&self.coord.trigger) = None;
    }

    /// Replaces the table with one of `nbuckets` buckets indexed by `hash`,
    /// moving every node. Concurrent operations proceed throughout.
    ///
    /// # Panics
    ///
    /// Panics when called inside a read-side critical section.
    pub fn rebuild(&self, nbuckets: usize, hash: HashFn) -> Result<RebuildStats, Error> {
        if nbuckets == 0 {
            return Err(Error::ZeroBuckets);
        }
        assert!(
            !reclaim::in_critical_section(),
            "rebuild called inside a read-side critical section"
        );
        let _serial = match self.coord.lock.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(e)) => e.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(Error::Busy),
        };
        let old_ptr = self.current.load(Ordering::Acquire);
        let old = unsafe { &*old_ptr };
        if let Some(trigger) = &*lock(&self.coord.trigger) {
            let census = || {
                let g = enter_critical();
                old.count(&g)
            };
            let req = RebuildRequest {
                current_buckets: old.buckets.len(),
                requested_buckets: nbuckets,
                census: &census,
            };
            if !trigger(&req) {
                return Err(Error::NotRequired);
            }
        }

        let new_ptr = Table::<V, B>::alloc(nbuckets, hash, old.era.flip());
        let new = unsafe { &*new_ptr };
        old.ht_new.store(new_ptr, Ordering::Release);
        point!(self, RebuildPublished, 0);
        // Operations that loaded a null `ht_new` may still insert into the
        // old buckets.
        reclaim::wait_for_readers();

        let park = Park(&self.coord.graveyard);
        let cur = &self.coord.rebuild_cur;
        let mut stats = RebuildStats::default();
        for bucket in old.buckets.iter() {
            bucket.close();
            loop {
                let g = enter_critical();
                let Some(node) = bucket.head_cursor(&g, &park) else {
                    break;
                };
                let key = node.key();
                cur.store(node as *const Node<V> as *mut Node<V>, Ordering::Release);
                fence(Ordering::Release);
                point!(self, RebuildAfterWriteCur, key);
                let moving = match bucket.delete(key, Flag::IsBeingDistributed, &g, &park) {
                    Deleted::Surrendered(n) => n,
                    _ => {
                        cur.store(ptr::null_mut(), Ordering::Release);
                        stats.skipped += 1;
                        continue;
                    }
                };
                debug_assert!(ptr::eq(moving, node));
                point!(self, RebuildAfterOldDelete, key);
                moving.prepare_for(new.era);
                match new.bucket(key).insert(NonNull::from(moving), &g, &park) {
                    Ok(()) => stats.distributed += 1,
                    Err(e) => {
                        park.retire(e.into_node());
                        stats.dropped += 1;
                    }
                }
                fence(Ordering::Release);
                point!(self, RebuildAfterNewInsert, key);
                cur.store(ptr::null_mut(), Ordering::Release);
                point!(self, RebuildAfterClearCur, key);
            }
        }

        point!(self, RebuildDistributed, 0);
        reclaim::wait_for_readers();
        self.current.store(new_ptr, Ordering::Release);
        point!(self, RebuildInstalled, 0);
        reclaim::wait_for_readers();

        for Grave(n) in mem::take(&mut *lock(&self.coord.graveyard)) {
            unsafe { reclaim::defer_drop(n.as_ptr()) };
        }
        // Every node has left the old buckets; this frees only the array.
        drop(unsafe { Box::from_raw(old_ptr) });
        Ok(stats)
    }

    /// True while a rebuild has published a replacement table.
    pub fn is_rebuilding(&self) -> bool {
        let g = enter_critical();
        !self.table(&g).ht_new.load(Ordering::Acquire).is_null()
    }

    pub fn nbuckets(&self) -> usize {
        let g = enter_critical();
        self.table(&g).buckets.len()
    }

    /// Number of live keys. Exact only while no other thread is modifying the
    /// table.
    pub fn len(&self) -> usize {
        self.keys().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Live keys in ascending order, across the current table and any table
    /// under construction. Exact only while no other thread is modifying the
    /// table.
    pub fn keys(&self) -> Vec<u64> {
        let g = enter_critical();
        let t = self.table(&g);
        let mut keys = Vec::new();
        let mut collect = |tab: &Table<V, B>| {
            for b in tab.buckets.iter() {
                b.for_each(&g, &mut |n| keys.push(n.key()));
            }
        };
        collect(t);
        if let Some(new) = unsafe { t.ht_new.load(Ordering::Acquire).as_ref() } {
            collect(new);
            if let Some(c) = self.rebuild_cur(&g) {
                if !c.is_logically_removed() {
                    keys.push(c.key());
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    /// Live key count per bucket of the current table. Quiescent use only.
    pub fn bucket_lens(&self) -> Vec<usize> {
        let g = enter_critical();
        self.table(&g)
            .buckets
            .iter()
            .map(|b| {
                let mut n = 0;
                b.for_each(&g, &mut |_| n += 1);
                n
            })
            .collect()
    }

    /// Structural checks that hold whenever no operation or rebuild is in
    /// flight: no pending replacement, no hazard node, every key in its hash
    /// bucket, keys strictly ascending per bucket and unique across buckets.
    pub fn check_invariants(&self) -> Result<(), String> {
        let g = enter_critical();
        let t = self.table(&g);
        if !t.ht_new.load(Ordering::Acquire).is_null() {
            return Err("replacement table still linked".into());
        }
        if self.rebuild_cur(&g).is_some() {
            return Err("rebuild_cur not cleared".into());
        }
        if t.buckets.iter().any(|b| b.era() != t.era) {
            return Err("bucket era differs from table era".into());
        }
        let mut seen = std::collections::HashSet::new();
        for (i, b) in t.buckets.iter().enumerate() {
            let mut last = None;
            let mut err = None;
            b.for_each(&g, &mut |n| {
                let k = n.key();
                if err.is_some() {
                    return;
                }
                if t.index(k) != i {
                    err = Some(format!("key {k} in bucket {i}, hashes to {}", t.index(k)));
                } else if last.is_some_and(|l| l >= k) {
                    err = Some(format!("bucket {i} out of order at {k}"));
                } else if !seen.insert(k) {
                    err = Some(format!("key {k} live twice"));
                }
                last = Some(k);
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        if !lock(&self.coord.graveyard).is_empty() {
            return Err("graveyard not empty outside a rebuild".into());
        }
        Ok(())
    }
}

impl<V, B: BucketSet<V>> Drop for DHash<V, B> {
    fn drop(&mut self) {
        let t = *self.current.get_mut();
        drop(unsafe { Box::from_raw(t) });
    }
}
