//! Throughput benchmark for [`dhash`]: worker threads run a configurable mix
//! of lookups, inserts and deletes over uniformly drawn keys, optionally while
//! another thread rebuilds the table back and forth.

pub mod config;
pub mod micro;
pub mod pin;
pub mod report;
pub mod run;
pub mod workload;

pub use config::{ConfigError, Mix, Pinning, RebuildMode, WorkloadConfig};
pub use report::{emit_report, Format, OpCounts, ThroughputReport};
pub use run::{measure_rebuild, run, RebuildSample, RunError};
pub use workload::{prefill, OpKind, OpStream};
