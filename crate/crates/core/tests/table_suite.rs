//! The table's behavioral suite, instantiated for each bucket implementation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dhash::{hash, reclaim, BucketSet, DHash, Error};

/// Payload counting live instances.
struct Counted {
    key: u64,
    live: Arc<AtomicUsize>,
}

impl Counted {
    fn new(key: u64, live: &Arc<AtomicUsize>) -> Self {
        live.fetch_add(1, Ordering::SeqCst);
        Counted {
            key,
            live: live.clone(),
        }
    }
}

impl Drop for Counted {
    fn drop(&mut self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

fn sequential_oracle<B: BucketSet<u64>>(ops: usize, seed: u64) {
    let t: DHash<u64, B> = DHash::new(16, hash::identity()).unwrap();
    let mut oracle = BTreeMap::new();
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..ops {
        let k = rng.random_range(0..1024u64);
        match rng.random_range(0..100) {
            0..50 => assert_eq!(t.get(k), oracle.get(&k).copied(), "op {i}: lookup {k}"),
            50..75 => {
                let expect = if oracle.contains_key(&k) {
                    Err(Error::Exists)
                } else {
                    Ok(())
                };
                assert_eq!(t.insert(k, i as u64), expect, "op {i}: insert {k}");
                oracle.entry(k).or_insert(i as u64);
            }
            _ => {
                let expect = oracle.remove(&k).map(|_| ()).ok_or(Error::NotFound);
                assert_eq!(t.delete(k), expect, "op {i}: delete {k}");
            }
        }
        if i % 10_000 == 9_999 {
            let nb = rng.random_range(1..64);
            t.rebuild(nb, hash::seeded(i as u64)).unwrap();
            t.check_invariants().unwrap();
        }
    }
    assert_eq!(t.keys(), oracle.keys().copied().collect::<Vec<_>>());
}

/// Writers own disjoint key sets and track them exactly while a thread
/// rebuilds continuously; readers check that resident keys never vanish.
fn concurrent_with_rebuild<B: BucketSet<Counted> + 'static>(millis: u64) {
    let live = Arc::new(AtomicUsize::new(0));
    let t: Arc<DHash<Counted, B>> = Arc::new(DHash::new(8, hash::identity()).unwrap());
    const RESIDENT: u64 = 64;
    for k in 0..RESIDENT {
        t.insert(k, Counted::new(k, &live)).unwrap();
    }
    let stop = Arc::new(AtomicBool::new(false));
    let rebuilds = Arc::new(AtomicU64::new(0));
    let rebuilder = {
        let (t, stop, rebuilds) = (t.clone(), stop.clone(), rebuilds.clone());
        thread::spawn(move || {
            let mut i = 0u64;
            while !stop.load(Ordering::Relaxed) {
                let nb = if i % 2 == 0 { 13 } else { 8 };
                t.rebuild(nb, hash::seeded(i)).unwrap();
                rebuilds.fetch_add(1, Ordering::Relaxed);
                i += 1;
            }
        })
    };
    let readers: Vec<_> = (0..2)
        .map(|r| {
            let (t, stop) = (t.clone(), stop.clone());
            thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(r);
                while !stop.load(Ordering::Relaxed) {
                    let k = rng.random_range(0..RESIDENT);
                    assert_eq!(
                        t.guarded_read(k, |v| v.key),
                        Ok(k),
                        "resident key {k} missing"
                    );
                }
            })
        })
        .collect();
    let writers: Vec<_> = (0..2u64)
        .map(|w| {
            let (t, stop, live) = (t.clone(), stop.clone(), live.clone());
            thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(100 + w);
                let mut mine = std::collections::BTreeSet::new();
                while !stop.load(Ordering::Relaxed) {
                    let k = 1000 + 2 * rng.random_range(0..200u64) + w;
                    if rng.random_bool(0.5) {
                        let r = t.insert(k, Counted::new(k, &live));
                        assert_eq!(r.is_ok(), mine.insert(k), "insert {k}");
                        assert!(t.contains(k), "inserted {k} not visible");
                    } else {
                        let r = t.delete(k);
                        assert_eq!(r.is_ok(), mine.remove(&k), "delete {k}");
                    }
                }
                mine
            })
        })
        .collect();
    thread::sleep(Duration::from_millis(millis));
    stop.store(true, Ordering::Relaxed);
    rebuilder.join().unwrap();
    for r in readers {
        r.join().unwrap();
    }
    let mut expect: Vec<u64> = (0..RESIDENT).collect();
    for w in writers {
        expect.extend(w.join().unwrap());
    }
    expect.sort_unstable();
    assert!(rebuilds.load(Ordering::Relaxed) > 0);
    assert_eq!(t.keys(), expect);
    t.check_invariants().unwrap();
    drop(t);
    reclaim::drain();
    assert_eq!(
        live.load(Ordering::SeqCst),
        0,
        "leaked or double-counted payloads"
    );
}

fn double_delete_single_success<B: BucketSet<u64> + 'static>() {
    let t: Arc<DHash<u64, B>> = Arc::new(DHash::new(4, hash::identity()).unwrap());
    let deadline = Instant::now() + Duration::from_millis(300);
    let mut round = 0u64;
    while Instant::now() < deadline {
        for k in 0..32 {
            t.insert(k, k).unwrap();
        }
        let wins = Arc::new(AtomicUsize::new(0));
        thread::scope(|s| {
            s.spawn(|| {
                t.rebuild(if round % 2 == 0 { 7 } else { 4 }, hash::seeded(round))
                    .unwrap()
            });
            for _ in 0..2 {
                s.spawn(|| {
                    for k in 0..32 {
                        if t.delete(k).is_ok() {
                            wins.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                });
            }
        });
        assert_eq!(wins.load(Ordering::SeqCst), 32, "round {round}");
        assert!(t.keys().is_empty());
        round += 1;
    }
}

fn rebuild_is_serialized<B: BucketSet<u64> + 'static>() {
    let t: DHash<u64, B> = DHash::new(4, hash::identity()).unwrap();
    for k in 0..2000 {
        t.insert(k, k).unwrap();
    }
    let t = &t;
    let results: Vec<_> = thread::scope(|s| {
        let hs: Vec<_> = (0..3)
            .map(|i| s.spawn(move || t.rebuild(5 + i, hash::seeded(i as u64))))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.iter().any(|r| r.is_ok()));
    assert!(results.iter().all(|r| r.is_ok() || *r == Err(Error::Busy)));
    assert_eq!(t.len(), 2000);
    t.check_invariants().unwrap();
}

type Helping<V> = dhash::LfList<V>;
type ReadOnly<V> = dhash::OrderedList<V, dhash::ReadOnlyLookup>;

macro_rules! suite {
    ($name:ident, $bucket:ident, $seed:expr) => {
        mod $name {
            use super::*;

            #[test]
            fn sequential_matches_oracle() {
                sequential_oracle::<$bucket<u64>>(100_000, $seed);
            }

            #[test]
            fn concurrent_ops_under_continuous_rebuild() {
                concurrent_with_rebuild::<$bucket<Counted>>(1500);
            }

            #[test]
            fn racing_deletes_succeed_once() {
                double_delete_single_success::<$bucket<u64>>();
            }

            #[test]
            fn concurrent_rebuilds_serialize() {
                rebuild_is_serialized::<$bucket<u64>>();
            }
        }
    };
}

suite!(helping_list, Helping, 11);
suite!(read_only_list, ReadOnly, 12);
