//! Lock-free ordered linked list used as a hash bucket.
//!
//! This is Michael's list with the hazard-pointer machinery replaced by
//! read-side critical sections from [`crate::reclaim`]. A node's successor
//! word packs three tag bits into the low bits of the link:
//!
//! * bit 0, [`Flag::LogicallyRemoved`]: deleted by an ordinary delete; the
//!   node is retired once physically unlinked.
//! * bit 1, [`Flag::IsBeingDistributed`]: removed by a rebuild that will
//!   reinsert the same node into another list; never retired by the list.
//! * bit 2, the list era: every link stored in a list carries that list's era.
//!
//! Nodes surrendered by a distribution delete are re-threaded into a list of
//! the opposite era. A traversal that loads a link whose era differs from its
//! own list's era has followed a reused node out of its list, and restarts from
//! the head. The era flip is also what keeps compare-and-swap on a reused
//! node's successor word from succeeding with a value read before the reuse.
//!
//! The head word uses bit 1 as a closed mark. A closed list accepts no insert
//! that would link at the head; since the rebuilder drains a bucket from the
//! front, closing the head means no key at or below the drain position can be
//! inserted again.

use std::fmt;
use std::marker::PhantomData;
use std::ptr::{self, NonNull};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::reclaim::{self, Guard};

const LR_BIT: usize = 1 << 0;
const ISBD_BIT: usize = 1 << 1;
const ERA_BIT: usize = 1 << 2;
const FLAG_MASK: usize = LR_BIT | ISBD_BIT;
const TAG_MASK: usize = FLAG_MASK | ERA_BIT;

/// A deletion mark stored in a node's successor word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    LogicallyRemoved,
    IsBeingDistributed,
}

impl Flag {
    const fn bit(self) -> usize {
        match self {
            Flag::LogicallyRemoved => LR_BIT,
            Flag::IsBeingDistributed => ISBD_BIT,
        }
    }
}

/// The two flag bits of a successor word.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct FlagBits(u8);

impl FlagBits {
    pub const NONE: FlagBits = FlagBits(0);

    fn from_word(word: usize) -> Self {
        FlagBits((word & FLAG_MASK) as u8)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, flag: Flag) -> bool {
        self.0 as usize & flag.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for FlagBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FlagBits({:02b})", self.0)
    }
}

/// Which of the two alternating list generations a list belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Era(bool);

impl Era {
    pub const ZERO: Era = Era(false);

    pub fn flip(self) -> Era {
        Era(!self.0)
    }

    fn bit(self) -> usize {
        if self.0 {
            ERA_BIT
        } else {
            0
        }
    }
}

/// A list node: key, read-only payload and tagged successor word.
#[repr(align(8))]
pub struct Node<V> {
    key: u64,
    value: V,
    next: AtomicUsize,
}

const _: () = assert!(std::mem::align_of::<Node<()>>() > TAG_MASK);

impl<V> Node<V> {
    /// Heap-allocates an unlinked node. The caller owns it until a successful
    /// insert.
    pub fn alloc(key: u64, value: V) -> NonNull<Node<V>> {
        let b = Box::new(Node {
            key,
            value,
            next: AtomicUsize::new(0),
        });
        NonNull::from(Box::leak(b))
    }

    /// Frees a node allocated by [`Node::alloc`].
    ///
    /// # Safety
    ///
    /// The node must be unreachable and no other thread may hold a reference.
    pub unsafe fn free(node: NonNull<Node<V>>) {
        drop(unsafe { Box::from_raw(node.as_ptr()) });
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn value(&self) -> &V {
        &self.value
    }

    pub fn flags(&self) -> FlagBits {
        FlagBits::from_word(self.next.load(Ordering::Acquire))
    }

    pub fn is_logically_removed(&self) -> bool {
        self.flags().contains(Flag::LogicallyRemoved)
    }

    /// Atomically sets `flag`; returns the flag bits held before.
    pub fn set_flag(&self, flag: Flag) -> FlagBits {
        FlagBits::from_word(self.next.fetch_or(flag.bit(), Ordering::AcqRel))
    }

    /// Atomically clears `flag`; returns the flag bits held before.
    pub fn clean_flag(&self, flag: Flag) -> FlagBits {
        FlagBits::from_word(self.next.fetch_and(!flag.bit(), Ordering::AcqRel))
    }

    /// Readies a surrendered node for insertion into a list of era `target`:
    /// drops the old successor and the distribution mark, keeps a concurrent
    /// logical removal, and stamps the new era in one atomic step.
    pub fn prepare_for(&self, target: Era) {
        let mut w = self.next.load(Ordering::Acquire);
        loop {
            let nw = (w & LR_BIT) | target.bit();
            match self
                .next
                .compare_exchange_weak(w, nw, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return,
                Err(x) => w = x,
            }
        }
    }

    #[cfg(test)]
    fn successor_word(&self) -> &AtomicUsize {
        &self.next
    }
}

impl<V: fmt::Debug> fmt::Debug for Node<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("key", &self.key)
            .field("value", &self.value)
            .field("flags", &self.flags())
            .finish()
    }
}

#[inline]
fn ptr_of<V>(word: usize) -> *mut Node<V> {
    (word & !TAG_MASK) as *mut Node<V>
}

/// Where a list hands nodes it has physically unlinked after a logical
/// removal.
pub trait Retire<V> {
    fn retire(&self, node: NonNull<Node<V>>);
}

/// Retires through [`reclaim::defer_free`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DeferFree;

impl<V: Send + 'static> Retire<V> for DeferFree {
    fn retire(&self, node: NonNull<Node<V>>) {
        unsafe { reclaim::defer_drop(node.as_ptr()) }
    }
}

/// Why an insert handed its node back.
pub enum InsertError<V> {
    /// An unmarked node with the same key is present.
    Exists(NonNull<Node<V>>),
    /// The node would have been linked at the head of a closed list.
    Closed(NonNull<Node<V>>),
}

impl<V> InsertError<V> {
    pub fn into_node(self) -> NonNull<Node<V>> {
        match self {
            InsertError::Exists(n) | InsertError::Closed(n) => n,
        }
    }
}

impl<V> fmt::Debug for InsertError<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertError::Exists(_) => f.write_str("Exists"),
            InsertError::Closed(_) => f.write_str("Closed"),
        }
    }
}

/// Result of a search: `prev` is the word that linked to `cur` when the
/// search observed it, `cur` the first unmarked node with key >= the target.
pub struct Snapshot<'g, V> {
    pub prev: &'g AtomicUsize,
    pub cur: Option<&'g Node<V>>,
    /// `cur`'s successor word as observed (tag bits included).
    pub next: usize,
}

impl<'g, V> Snapshot<'g, V> {
    pub fn next_node(&self) -> Option<&'g Node<V>> {
        unsafe { ptr_of::<V>(self.next).as_ref() }
    }
}

pub struct Search<'g, V> {
    pub found: bool,
    pub snapshot: Snapshot<'g, V>,
}

/// Outcome of a delete.
pub enum Deleted<'g, V> {
    /// The node was logically removed by this call and retired.
    Removed,
    /// The node was marked for distribution and unlinked; the caller now owns
    /// it.
    Surrendered(&'g Node<V>),
    NotFound,
}

impl<V> fmt::Debug for Deleted<'_, V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Deleted::Removed => f.write_str("Removed"),
            Deleted::Surrendered(n) => write!(f, "Surrendered({})", n.key),
            Deleted::NotFound => f.write_str("NotFound"),
        }
    }
}

/// Physical-unlink policy for the read path.
pub trait UnlinkPolicy: Send + Sync + 'static {
    /// When true, lookups help unlink marked nodes like any other search.
    /// When false, lookups never write and step over marked nodes.
    const LOOKUP_HELPS: bool;
}

/// Michael's discipline: every traversal unlinks the marked nodes it meets.
pub struct HelpingLookup;

impl UnlinkPolicy for HelpingLookup {
    const LOOKUP_HELPS: bool = true;
}

/// Lookups are read-only; only inserts and deletes unlink.
pub struct ReadOnlyLookup;

impl UnlinkPolicy for ReadOnlyLookup {
    const LOOKUP_HELPS: bool = false;
}

/// The ordered set list. See the module docs.
pub struct OrderedList<V, P: UnlinkPolicy = HelpingLookup> {
    head: AtomicUsize,
    era: Era,
    _marker: PhantomData<(Box<Node<V>>, P)>,
}

/// The shipped bucket implementation.
pub type LfList<V> = OrderedList<V, HelpingLookup>;

unsafe impl<V: Send + Sync, P: UnlinkPolicy> Send for OrderedList<V, P> {}
unsafe impl<V: Send + Sync, P: UnlinkPolicy> Sync for OrderedList<V, P> {}

impl<V, P: UnlinkPolicy> Default for OrderedList<V, P> {
    fn default() -> Self {
        Self::with_era(Era::ZERO)
    }
}

impl<V, P: UnlinkPolicy> OrderedList<V, P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_era(era: Era) -> Self {
        OrderedList {
            head: AtomicUsize::new(era.bit()),
            era,
            _marker: PhantomData,
        }
    }

    pub fn era(&self) -> Era {
        self.era
    }

    pub fn head_word(&self) -> &AtomicUsize {
        &self.head
    }

    #[inline]
    fn clean(&self, p: *const Node<V>) -> usize {
        p as usize | self.era.bit()
    }

    /// Closes the head against inserts. Irreversible.
    pub fn close(&self) {
        self.head.fetch_or(ISBD_BIT, Ordering::AcqRel);
    }

    pub fn is_closed(&self) -> bool {
        self.head.load(Ordering::Acquire) & ISBD_BIT != 0
    }

    /// Tag bits a predecessor word must keep when rewritten.
    #[inline]
    fn prev_bits(&self, prev: &AtomicUsize) -> usize {
        if ptr::eq(prev, &self.head) {
            prev.load(Ordering::Acquire) & ISBD_BIT
        } else {
            0
        }
    }

    /// Finds the first unmarked node with key >= `key`, unlinking marked nodes
    /// on the way. Restarts from the head on a failed unlink or when a link of
    /// a foreign era shows up.
    pub fn find<'g>(
        &'g self,
        key: u64,
        _guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Search<'g, V> {
        let era = self.era.bit();
        'retry: loop {
            let mut prev: &'g AtomicUsize = &self.head;
            let mut cur_w = prev.load(Ordering::Acquire);
            loop {
                if cur_w & ERA_BIT != era {
                    continue 'retry;
                }
                let cur = ptr_of::<V>(cur_w);
                if cur.is_null() {
                    return Search {
                        found: false,
                        snapshot: Snapshot {
                            prev,
                            cur: None,
                            next: 0,
                        },
                    };
                }
                let node: &'g Node<V> = unsafe { &*cur };
                let next_w = node.next.load(Ordering::Acquire);
                if next_w & ERA_BIT != era {
                    continue 'retry;
                }
                if prev.load(Ordering::Acquire) != cur_w {
                    continue 'retry;
                }
                if next_w & FLAG_MASK == 0 {
                    if node.key >= key {
                        return Search {
                            found: node.key == key,
                            snapshot: Snapshot {
                                prev,
                                cur: Some(node),
                                next: next_w,
                            },
                        };
                    }
                    prev = &node.next;
                    cur_w = next_w;
                } else {
                    let succ_w = (next_w & !FLAG_MASK) | (cur_w & FLAG_MASK);
                    if prev
                        .compare_exchange(cur_w, succ_w, Ordering::AcqRel, Ordering::Acquire)
                        .is_err()
                    {
                        continue 'retry;
                    }
                    if next_w & ISBD_BIT == 0 {
                        retire.retire(NonNull::from(node));
                    }
                    cur_w = succ_w;
                }
            }
        }
    }

    /// Membership query returning the matching unmarked node.
    pub fn lookup<'g>(
        &'g self,
        key: u64,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Option<&'g Node<V>> {
        if P::LOOKUP_HELPS {
            let s = self.find(key, guard, retire);
            return if s.found { s.snapshot.cur } else { None };
        }
        let era = self.era.bit();
        'retry: loop {
            let mut w = self.head.load(Ordering::Acquire);
            loop {
                if w & ERA_BIT != era {
                    continue 'retry;
                }
                let node = match unsafe { ptr_of::<V>(w).as_ref() } {
                    None => return None,
                    Some(n) => n,
                };
                let next_w = node.next.load(Ordering::Acquire);
                if next_w & ERA_BIT != era {
                    continue 'retry;
                }
                if next_w & FLAG_MASK == 0 && node.key >= key {
                    return (node.key == key).then_some(node);
                }
                w = next_w & !FLAG_MASK;
            }
        }
    }

    /// Links `node` at its sorted position. On `Err` the list is unchanged and
    /// the node is handed back. A closed list refuses links at the head.
    ///
    /// The node's successor word is overwritten except for a
    /// `LogicallyRemoved` bit, which survives so that a delete racing a
    /// distribution is not lost.
    pub fn insert(
        &self,
        node: NonNull<Node<V>>,
        guard: &Guard,
        retire: &dyn Retire<V>,
    ) -> Result<(), InsertError<V>> {
        let n = unsafe { node.as_ref() };
        loop {
            let s = self.find(n.key, guard, retire);
            if s.found {
                return Err(InsertError::Exists(node));
            }
            let bits = self.prev_bits(s.snapshot.prev);
            if bits != 0 {
                return Err(InsertError::Closed(node));
            }
            let cur_w = self.clean(s.snapshot.cur.map_or(ptr::null(), |c| c as *const _));
            let mut w = n.next.load(Ordering::Acquire);
            loop {
                let nw = cur_w | (w & LR_BIT);
                match n
                    .next
                    .compare_exchange_weak(w, nw, Ordering::AcqRel, Ordering::Acquire)
                {
                    Ok(_) => break,
                    Err(x) => w = x,
                }
            }
            if s.snapshot
                .prev
                .compare_exchange(
                    cur_w,
                    self.clean(node.as_ptr()),
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok()
            {
                return Ok(());
            }
        }
    }

    /// Marks the unmarked node with `key` using `flag`, then unlinks it.
    ///
    /// With `LogicallyRemoved` the node is retired. With `IsBeingDistributed`
    /// it is guaranteed unlinked on return and surrendered to the caller.
    pub fn delete<'g>(
        &'g self,
        key: u64,
        flag: Flag,
        guard: &'g Guard,
        retire: &dyn Retire<V>,
    ) -> Deleted<'g, V> {
        loop {
            let s = self.find(key, guard, retire);
            if !s.found {
                return Deleted::NotFound;
            }
            let node = s.snapshot.cur.expect("found implies a node");
            let next_w = s.snapshot.next;
            if node
                .next
                .compare_exchange(
                    next_w,
                    next_w | flag.bit(),
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_err()
            {
                continue;
            }
            let bits = self.prev_bits(s.snapshot.prev);
            if s.snapshot
                .prev
                .compare_exchange(
                    self.clean(node) | bits,
                    next_w | bits,
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok()
            {
                if flag == Flag::LogicallyRemoved {
                    retire.retire(NonNull::from(node));
                }
            } else {
                // Someone else owns the unlink; a search guarantees it has
                // happened before we return.
                self.find(key, guard, retire);
            }
            return match flag {
                Flag::LogicallyRemoved => Deleted::Removed,
                Flag::IsBeingDistributed => Deleted::Surrendered(node),
            };
        }
    }

    /// First unmarked node, unlinking marked ones ahead of it.
    pub fn first<'g>(&'g self, guard: &'g Guard, retire: &dyn Retire<V>) -> Option<&'g Node<V>> {
        self.find(0, guard, retire).snapshot.cur
    }

    /// Ordered iterator over unmarked nodes. Read-only and weakly consistent;
    /// exact only when no writer is active.
    pub fn iter<'g>(&'g self, _guard: &'g Guard) -> Iter<'g, V> {
        Iter {
            word: self.head.load(Ordering::Acquire),
            _marker: PhantomData,
        }
    }

    /// Number of nodes physically linked, marked or not. Quiescent use only.
    pub fn linked_len(&mut self) -> usize {
        let mut n = 0;
        let mut w = *self.head.get_mut();
        while let Some(node) = unsafe { ptr_of::<V>(w).as_ref() } {
            n += 1;
            w = node.next.load(Ordering::Relaxed);
        }
        n
    }
}

impl<V, P: UnlinkPolicy> Drop for OrderedList<V, P> {
    fn drop(&mut self) {
        let mut w = *self.head.get_mut();
        while let Some(node) = NonNull::new(ptr_of::<V>(w)) {
            w = unsafe { node.as_ref() }.next.load(Ordering::Relaxed);
            unsafe { Node::free(node) };
        }
    }
}

pub struct Iter<'g, V> {
    word: usize,
    _marker: PhantomData<&'g Node<V>>,
}

impl<'g, V> Iterator for Iter<'g, V> {
    type Item = &'g Node<V>;

    fn next(&mut self) -> Option<&'g Node<V>> {
        loop {
            let node: &'g Node<V> = unsafe { ptr_of::<V>(self.word).as_ref() }?;
            let next_w = node.next.load(Ordering::Acquire);
            self.word = next_w & !FLAG_MASK;
            if next_w & FLAG_MASK == 0 {
                return Some(node);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reclaim::enter_critical;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn list_of(keys: &[u64]) -> LfList<u64> {
        let l = LfList::new();
        let g = enter_critical();
        for &k in keys {
            assert!(l.insert(Node::alloc(k, k), &g, &DeferFree).is_ok());
        }
        l
    }

    fn keys(l: &LfList<u64>) -> Vec<u64> {
        let g = enter_critical();
        l.iter(&g).map(|n| n.key()).collect()
    }

    #[test]
    fn find_in_empty_list() {
        let l: LfList<u64> = LfList::new();
        let g = enter_critical();
        let s = l.find(5, &g, &DeferFree);
        assert!(!s.found);
        assert!(s.snapshot.cur.is_none());
        assert!(ptr::eq(s.snapshot.prev, l.head_word()));
    }

    #[test]
    fn find_links_from_predecessor() {
        let l = list_of(&[3, 7, 9]);
        let g = enter_critical();
        let s = l.find(7, &g, &DeferFree);
        assert!(s.found);
        let cur = s.snapshot.cur.unwrap();
        assert_eq!(cur.key(), 7);
        let three = l.find(3, &g, &DeferFree).snapshot.cur.unwrap();
        assert!(ptr::eq(s.snapshot.prev, three.successor_word()));
        assert_eq!(s.snapshot.next_node().unwrap().key(), 9);
        let s = l.find(8, &g, &DeferFree);
        assert!(!s.found);
        assert_eq!(s.snapshot.cur.unwrap().key(), 9);
    }

    #[test]
    fn find_unlinks_marked_node() {
        let mut l = list_of(&[3, 7, 9]);
        {
            let g = enter_critical();
            let seven = l.find(7, &g, &DeferFree).snapshot.cur.unwrap();
            assert!(seven.set_flag(Flag::LogicallyRemoved).is_empty());
            let s = l.find(7, &g, &DeferFree);
            assert!(!s.found);
            assert_eq!(s.snapshot.cur.unwrap().key(), 9);
        }
        assert_eq!(l.linked_len(), 2);
        assert_eq!(keys(&l), vec![3, 9]);
    }

    #[test]
    fn insert_and_duplicate() {
        let l: LfList<u64> = LfList::new();
        let g = enter_critical();
        assert!(l.insert(Node::alloc(5, 5), &g, &DeferFree).is_ok());
        let dup = Node::alloc(5, 50);
        let back = match l.insert(dup, &g, &DeferFree) {
            Err(InsertError::Exists(n)) => n,
            other => panic!("{other:?}"),
        };
        assert_eq!(back, dup);
        unsafe { Node::free(back) };
        drop(g);
        assert_eq!(keys(&l), vec![5]);
    }

    #[test]
    fn delete_removed_and_missing() {
        let l = list_of(&[5]);
        let g = enter_critical();
        assert!(matches!(
            l.delete(5, Flag::LogicallyRemoved, &g, &DeferFree),
            Deleted::Removed
        ));
        assert!(matches!(
            l.delete(5, Flag::LogicallyRemoved, &g, &DeferFree),
            Deleted::NotFound
        ));
        drop(g);
        assert!(keys(&l).is_empty());
    }

    #[test]
    fn distribution_delete_surrenders_node() {
        let mut l = list_of(&[4, 5, 6]);
        let surrendered = {
            let g = enter_critical();
            match l.delete(5, Flag::IsBeingDistributed, &g, &DeferFree) {
                Deleted::Surrendered(n) => {
                    assert_eq!(n.key(), 5);
                    assert_eq!(*n.value(), 5);
                    assert!(n.flags().contains(Flag::IsBeingDistributed));
                    assert!(!n.flags().contains(Flag::LogicallyRemoved));
                    NonNull::from(n)
                }
                other => panic!("{other:?}"),
            }
        };
        reclaim::drain();
        assert_eq!(l.linked_len(), 2);
        unsafe { Node::free(surrendered) };
    }

    #[test]
    fn flag_helpers() {
        let n = unsafe { Node::alloc(1, ()).as_ref() };
        assert_eq!(n.set_flag(Flag::LogicallyRemoved), FlagBits::NONE);
        assert!(n
            .set_flag(Flag::LogicallyRemoved)
            .contains(Flag::LogicallyRemoved));
        assert_eq!(n.clean_flag(Flag::IsBeingDistributed).bits(), 0b01);
        n.set_flag(Flag::IsBeingDistributed);
        assert_eq!(n.clean_flag(Flag::IsBeingDistributed).bits(), 0b11);
        assert_eq!(n.clean_flag(Flag::LogicallyRemoved).bits(), 0b01);
        assert!(n.flags().is_empty());
        unsafe { Node::free(NonNull::from(n)) };
    }

    #[test]
    fn concurrent_flag_bits_do_not_clobber_link() {
        // Every interleaving of two fetch-or/fetch-and pairs on distinct bits
        // leaves the link untouched and the right bits set.
        let target = unsafe { Node::alloc(2, ()).as_ref() };
        let holder = unsafe { Node::alloc(1, ()).as_ref() };
        for round in 0..2000 {
            holder
                .successor_word()
                .store(target as *const _ as usize, Ordering::SeqCst);
            std::thread::scope(|s| {
                s.spawn(|| holder.set_flag(Flag::LogicallyRemoved));
                s.spawn(|| {
                    holder.set_flag(Flag::IsBeingDistributed);
                    if round % 2 == 0 {
                        holder.clean_flag(Flag::IsBeingDistributed);
                    }
                });
            });
            let w = holder.successor_word().load(Ordering::SeqCst);
            assert_eq!(ptr_of::<()>(w), target as *const _ as *mut _);
            let want = if round % 2 == 0 { 0b01 } else { 0b11 };
            assert_eq!(FlagBits::from_word(w).bits(), want);
        }
        unsafe {
            Node::free(NonNull::from(holder));
            Node::free(NonNull::from(target));
        }
    }

    #[test]
    fn prepare_keeps_logical_removal() {
        let n = unsafe { Node::alloc(1, ()).as_ref() };
        n.set_flag(Flag::IsBeingDistributed);
        n.set_flag(Flag::LogicallyRemoved);
        n.prepare_for(Era::ZERO.flip());
        assert_eq!(n.flags().bits(), 0b01);
        assert_eq!(n.successor_word().load(Ordering::Relaxed), LR_BIT | ERA_BIT);
        unsafe { Node::free(NonNull::from(n)) };
    }

    #[test]
    fn reused_node_does_not_redirect_traversal() {
        // Move 1 from `a` into `b`, where it precedes other keys. A lookup
        // starting at the moved node's old position must not wander into `b`.
        let a = list_of(&[1, 2, 3]);
        let b: LfList<u64> = LfList::with_era(Era::ZERO.flip());
        let g = enter_critical();
        for k in [0, 10] {
            assert!(b.insert(Node::alloc(k, k), &g, &DeferFree).is_ok());
        }
        let s = a.find(2, &g, &DeferFree);
        let stale_prev = s.snapshot.prev;
        let stale_cur = a.clean(s.snapshot.cur.unwrap());
        let one = match a.delete(1, Flag::IsBeingDistributed, &g, &DeferFree) {
            Deleted::Surrendered(n) => n,
            other => panic!("{other:?}"),
        };
        one.prepare_for(b.era());
        assert!(b.insert(NonNull::from(one), &g, &DeferFree).is_ok());
        // The stale predecessor word now lives in `b` and carries its era.
        assert!(stale_prev
            .compare_exchange(stale_cur, 0, Ordering::AcqRel, Ordering::Acquire)
            .is_err());
        assert!(a.lookup(3, &g, &DeferFree).is_some());
        assert!(b.lookup(1, &g, &DeferFree).is_some());
        assert!(b.lookup(3, &g, &DeferFree).is_none());
        drop(g);
        assert_eq!(keys(&a), vec![2, 3]);
        assert_eq!(keys(&b), vec![0, 1, 10]);
    }

    #[test]
    fn closed_list_refuses_head_links_only() {
        let l = list_of(&[10, 20]);
        l.close();
        assert!(l.is_closed());
        let g = enter_critical();
        assert!(l.insert(Node::alloc(15, 15), &g, &DeferFree).is_ok());
        match l.insert(Node::alloc(5, 5), &g, &DeferFree) {
            Err(InsertError::Closed(n)) => unsafe { Node::free(n) },
            other => panic!("{other:?}"),
        }
        // Draining the front keeps the head closed.
        let ten = match l.delete(10, Flag::IsBeingDistributed, &g, &DeferFree) {
            Deleted::Surrendered(n) => NonNull::from(n),
            other => panic!("{other:?}"),
        };
        assert!(matches!(
            l.delete(15, Flag::LogicallyRemoved, &g, &DeferFree),
            Deleted::Removed
        ));
        assert!(l.is_closed());
        match l.insert(Node::alloc(12, 12), &g, &DeferFree) {
            Err(InsertError::Closed(n)) => unsafe { Node::free(n) },
            other => panic!("{other:?}"),
        }
        assert!(l.insert(Node::alloc(30, 30), &g, &DeferFree).is_ok());
        drop(g);
        unsafe { Node::free(ten) };
        assert_eq!(keys(&l), vec![20, 30]);
    }

    #[test]
    fn thousand_random_inserts_match_sorted_set() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        let l: LfList<u64> = LfList::new();
        let mut oracle = BTreeSet::new();
        let g = enter_critical();
        for _ in 0..1000 {
            let k = rng.random_range(0..4096);
            let node = Node::alloc(k, k);
            match l.insert(node, &g, &DeferFree) {
                Ok(()) => assert!(oracle.insert(k)),
                Err(e) => {
                    assert!(!oracle.insert(k));
                    unsafe { Node::free(e.into_node()) };
                }
            }
        }
        drop(g);
        assert_eq!(keys(&l), oracle.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn read_only_lookup_skips_marked_nodes() {
        let l: OrderedList<u64, ReadOnlyLookup> = OrderedList::new();
        let g = enter_critical();
        for k in [1, 2, 3] {
            l.insert(Node::alloc(k, k), &g, &DeferFree).unwrap();
        }
        let two = l.lookup(2, &g, &DeferFree).unwrap();
        two.set_flag(Flag::LogicallyRemoved);
        assert!(l.lookup(2, &g, &DeferFree).is_none());
        assert!(l.lookup(3, &g, &DeferFree).is_some());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u64),
        Delete(u64),
        Find(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..64).prop_map(Op::Insert),
            (0u64..64).prop_map(Op::Delete),
            (0u64..64).prop_map(Op::Find),
        ]
    }

    proptest! {
        #[test]
        fn sequential_ops_match_oracle(ops in proptest::collection::vec(op(), 1..400)) {
            let l: LfList<u64> = LfList::new();
            let mut oracle = BTreeSet::new();
            let g = enter_critical();
            for op in ops {
                match op {
                    Op::Insert(k) => match l.insert(Node::alloc(k, k), &g, &DeferFree) {
                        Ok(()) => prop_assert!(oracle.insert(k)),
                        Err(e) => {
                            prop_assert!(oracle.contains(&k));
                            unsafe { Node::free(e.into_node()) };
                        }
                    },
                    Op::Delete(k) => {
                        let removed = matches!(l.delete(k, Flag::LogicallyRemoved, &g, &DeferFree), Deleted::Removed);
                        prop_assert_eq!(removed, oracle.remove(&k));
                    }
                    Op::Find(k) => {
                        let s = l.find(k, &g, &DeferFree);
                        prop_assert_eq!(s.found, oracle.contains(&k));
                        let expect = oracle.range(k..).next().copied();
                        prop_assert_eq!(s.snapshot.cur.map(|n| n.key()), expect);
                    }
                }
            }
            drop(g);
            prop_assert_eq!(keys(&l), oracle.into_iter().collect::<Vec<_>>());
        }
    }
}
