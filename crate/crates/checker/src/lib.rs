//! Correctness tooling for the dhash table: recorded histories and a
//! linearizability checker, exhaustive schedule exploration around a
//! rebuild, and stress suites for lookup, delete and insert guarantees.

pub mod history;
pub mod linearize;
pub mod sched;
pub mod stress;

pub use history::{record_run, History, HistoryEvent, OpKind, Operation, Phase, RecordParams};
pub use linearize::{check_linearizable, Verdict};
pub use stress::{StressConfig, StressReport, Suite};
