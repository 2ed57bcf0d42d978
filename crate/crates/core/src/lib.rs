//! DHash: a concurrent hash table whose hash function can be replaced at run
//! time without stopping readers or writers.
//!
//! ```
//! use dhash::{hash, DHash};
//!
//! let t: DHash<&str> = DHash::new(2, hash::identity()).unwrap();
//! t.insert(1, "one").unwrap();
//! t.insert(2, "two").unwrap();
//! t.rebuild(16, hash::seeded(7)).unwrap();
//! assert_eq!(t.get(2), Some("two"));
//! ```
//!
//! Modules:
//!
//! * [`reclaim`]: read-side critical sections and deferred reclamation.
//! * [`list`]: the lock-free ordered list used as a bucket.
//! * [`bucket`]: the interface a bucket implementation must satisfy.
//! * [`table`]: the table itself.

pub mod bucket;
pub mod error;
pub mod hash;
pub mod list;
pub mod reclaim;
pub mod schedule;
pub mod table;

pub use bucket::{BucketSet, Progress, Redirection};
pub use error::Error;
pub use hash::HashFn;
pub use list::{
    Deleted, Era, Flag, FlagBits, InsertError, LfList, Node, OrderedList, ReadOnlyLookup,
};
pub use reclaim::{enter_critical, exit_critical, Guard};
pub use schedule::{ScheduleHook, SchedulePoint};
pub use table::{DHash, RebuildRequest, RebuildStats};
