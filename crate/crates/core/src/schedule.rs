//! Named program points inside the table's operations, for tests that force
//! specific interleavings. Hooks only exist with the `schedule-points`
//! feature; without it the points compile to nothing.

/// A point between two steps of an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchedulePoint {
    /// The replacement table is visible; before the first grace period.
    RebuildPublished,
    /// `rebuild_cur` now references the node about to move.
    RebuildAfterWriteCur,
    /// The node has been unlinked from the old bucket.
    RebuildAfterOldDelete,
    /// The node is linked in the new bucket (or dropped as a duplicate).
    RebuildAfterNewInsert,
    /// `rebuild_cur` is null again.
    RebuildAfterClearCur,
    /// Every node has moved; before the grace period that precedes
    /// installation.
    RebuildDistributed,
    /// The replacement table is current; before the last grace period.
    RebuildInstalled,
    LookupAfterOldFind,
    LookupAfterCurCheck,
    LookupAfterNewFind,
    DeleteAfterOldDelete,
    DeleteAfterCurCheck,
    DeleteAfterNewDelete,
    InsertAfterOldInsert,
    InsertAfterCurCheck,
    InsertAfterNewInsert,
}

impl SchedulePoint {
    pub const ALL: [SchedulePoint; 16] = [
        SchedulePoint::RebuildPublished,
        SchedulePoint::RebuildAfterWriteCur,
        SchedulePoint::RebuildAfterOldDelete,
        SchedulePoint::RebuildAfterNewInsert,
        SchedulePoint::RebuildAfterClearCur,
        SchedulePoint::RebuildDistributed,
        SchedulePoint::RebuildInstalled,
        SchedulePoint::LookupAfterOldFind,
        SchedulePoint::LookupAfterCurCheck,
        SchedulePoint::LookupAfterNewFind,
        SchedulePoint::DeleteAfterOldDelete,
        SchedulePoint::DeleteAfterCurCheck,
        SchedulePoint::DeleteAfterNewDelete,
        SchedulePoint::InsertAfterOldInsert,
        SchedulePoint::InsertAfterCurCheck,
        SchedulePoint::InsertAfterNewInsert,
    ];

    pub fn is_rebuild(self) -> bool {
        matches!(
            self,
            SchedulePoint::RebuildPublished
                | SchedulePoint::RebuildAfterWriteCur
                | SchedulePoint::RebuildAfterOldDelete
                | SchedulePoint::RebuildAfterNewInsert
                | SchedulePoint::RebuildAfterClearCur
                | SchedulePoint::RebuildDistributed
                | SchedulePoint::RebuildInstalled
        )
    }
}

/// Called at every schedule point with the key involved. Hooks run inside
/// read-side critical sections, except at the points that precede a grace
/// period (`RebuildPublished`, `RebuildDistributed` and `RebuildInstalled`),
/// and so must not wait for readers.
pub trait ScheduleHook: Send + Sync {
    fn at(&self, point: SchedulePoint, key: u64);
}

impl<F: Fn(SchedulePoint, u64) + Send + Sync> ScheduleHook for F {
    fn at(&self, point: SchedulePoint, key: u64) {
        self(point, key)
    }
}
