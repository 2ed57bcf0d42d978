//! Deterministic per-thread operation streams and prefill.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dhash::{BucketSet, DHash};

use crate::config::{ConfigError, Mix, WorkloadConfig};

pub const GENERATOR: &str = "ChaCha8";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Lookup,
    Insert,
    Delete,
}

/// The operation stream of one worker. Two streams built from the same seed,
/// mix, key range and thread index are identical.
pub struct OpStream {
    rng: ChaCha8Rng,
    mix: Mix,
    key_range: u64,
}

impl OpStream {
    pub fn new(seed: u64, thread: usize, mix: Mix, key_range: u64) -> OpStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(thread as u64 + 1);
        OpStream {
            rng,
            mix,
            key_range,
        }
    }

    pub fn for_worker(config: &WorkloadConfig, thread: usize) -> OpStream {
        OpStream::new(config.seed, thread, config.mix, config.key_range)
    }
}

impl Iterator for OpStream {
    type Item = (OpKind, u64);

    #[inline]
    fn next(&mut self) -> Option<(OpKind, u64)> {
        let r = self.rng.random_range(0..100u8);
        let op = if r < self.mix.lookup {
            OpKind::Lookup
        } else if r < self.mix.lookup + self.mix.insert {
            OpKind::Insert
        } else {
            OpKind::Delete
        };
        Some((op, self.rng.random_range(0..self.key_range)))
    }
}

/// Draws `count` distinct keys uniformly from `0..key_range`.
pub fn distinct_keys(seed: u64, count: u64, key_range: u64) -> Result<Vec<u64>, ConfigError> {
    if count > key_range {
        return Err(ConfigError::KeyRange {
            nodes: count,
            keys: key_range,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    if key_range <= usize::MAX as u64 {
        Ok(index::sample(&mut rng, key_range as usize, count as usize)
            .into_iter()
            .map(|k| k as u64)
            .collect())
    } else {
        let mut seen = std::collections::HashSet::with_capacity(count as usize);
        while (seen.len() as u64) < count {
            seen.insert(rng.random_range(0..key_range));
        }
        Ok(seen.into_iter().collect())
    }
}

/// Inserts α·β distinct keys drawn from the key range into an empty table.
pub fn prefill<B: BucketSet<u64>>(
    table: &DHash<u64, B>,
    config: &WorkloadConfig,
) -> Result<u64, ConfigError> {
    config.validate()?;
    prefill_count(table, config.seed, config.prefill_count(), config.key_range)
}

pub fn prefill_count<B: BucketSet<u64>>(
    table: &DHash<u64, B>,
    seed: u64,
    count: u64,
    key_range: u64,
) -> Result<u64, ConfigError> {
    let keys = distinct_keys(seed, count, key_range)?;
    for &k in &keys {
        table
            .insert(k, k)
            .expect("prefill keys are distinct and the table empty");
    }
    Ok(keys.len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_per_thread() {
        let a: Vec<_> = OpStream::new(9, 0, Mix::BALANCED, 100).take(1000).collect();
        let b: Vec<_> = OpStream::new(9, 0, Mix::BALANCED, 100).take(1000).collect();
        let c: Vec<_> = OpStream::new(9, 1, Mix::BALANCED, 100).take(1000).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stream_follows_mix() {
        let ops: Vec<_> = OpStream::new(1, 0, Mix::new(100, 0, 0).unwrap(), 10)
            .take(500)
            .collect();
        assert!(ops.iter().all(|(op, k)| *op == OpKind::Lookup && *k < 10));
        let n = 100_000;
        let inserts = OpStream::new(1, 0, Mix::READ_MOSTLY, 10)
            .take(n)
            .filter(|(op, _)| *op == OpKind::Insert)
            .count();
        assert!((4_000..6_000).contains(&inserts), "{inserts}");
    }

    #[test]
    fn distinct_keys_fill_range_exactly() {
        let mut keys = distinct_keys(3, 50, 50).unwrap();
        keys.sort_unstable();
        assert_eq!(keys, (0..50).collect::<Vec<_>>());
        assert!(distinct_keys(3, 51, 50).is_err());
    }
}
