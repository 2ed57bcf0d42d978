use std::time::Duration;

use dhash_harness::config::{Mix, Pinning, RebuildMode, WorkloadConfig};
use dhash_harness::report::{read_csv, read_json, write_csv, write_json};
use dhash_harness::run::{measure_rebuild, run};

fn small(threads: usize) -> WorkloadConfig {
    WorkloadConfig {
        mix: Mix::BALANCED,
        load_factor: 4.0,
        buckets: 64,
        key_range: 2 * 64 * 4,
        threads,
        duration: Duration::from_millis(200),
        rebuild: RebuildMode::Off,
        seed: 3,
        pinning: Pinning::None,
    }
}

#[test]
fn report_totals_are_per_thread_sums() {
    let r = run(&small(3)).unwrap();
    assert_eq!(r.threads.len(), 3);
    assert!(r.is_conserved());
    assert_eq!(r.prefilled, 256);
}

#[test]
fn census_matches_successful_updates() {
    for rebuild in [
        RebuildMode::Off,
        RebuildMode::Continuous {
            alt_buckets: 128,
            same_hash: false,
        },
    ] {
        let cfg = WorkloadConfig {
            rebuild,
            ..small(2)
        };
        let r = run(&cfg).unwrap();
        let expect = r.prefilled + r.totals.insert_ok - r.totals.delete_ok;
        assert_eq!(r.final_census, expect, "{rebuild:?}");
    }
}

#[test]
fn steady_mix_keeps_population_near_prefill() {
    // With the key range at twice the prefill, equal insert and delete rates
    // leave the expected population where it started.
    let cfg = WorkloadConfig {
        duration: Duration::from_millis(500),
        ..small(2)
    };
    let r = run(&cfg).unwrap();
    let drift = r.final_census as f64 / r.prefilled as f64;
    assert!((0.75..1.25).contains(&drift), "drift {drift}");
}

#[test]
fn lookups_only_never_change_the_table() {
    let cfg = WorkloadConfig {
        mix: Mix::new(100, 0, 0).unwrap(),
        ..small(1)
    };
    let r = run(&cfg).unwrap();
    assert_eq!(r.final_census, r.prefilled);
    assert_eq!(r.totals.lookups, r.totals.total());
    assert!(r.totals.lookup_hits > 0);
}

#[test]
fn continuous_rebuild_records_durations() {
    let cfg = WorkloadConfig {
        rebuild: RebuildMode::Continuous {
            alt_buckets: 128,
            same_hash: true,
        },
        ..small(1)
    };
    let r = run(&cfg).unwrap();
    assert!(!r.rebuild_seconds.is_empty());
    assert!(r.rebuild_mean() > 0.0);
}

#[test]
fn reports_round_trip() {
    let r = run(&small(2)).unwrap();
    let mut csv = Vec::new();
    write_csv(&r, &mut csv).unwrap();
    assert_eq!(read_csv(&csv[..]).unwrap(), r);
    let mut json = Vec::new();
    write_json(&r, &mut json).unwrap();
    assert_eq!(read_json(&json[..]).unwrap(), r);
}

#[test]
fn pinned_run_completes() {
    let cfg = WorkloadConfig {
        pinning: Pinning::PerformanceFirst,
        ..small(2)
    };
    let r = run(&cfg).unwrap();
    if r.host.pinned {
        assert!(r.threads.iter().all(|t| t.cpu.is_some()));
    }
}

#[test]
fn rebuild_samples_cover_each_population() {
    let s = measure_rebuild(&small(1), &[500, 1000], 3).unwrap();
    assert_eq!(s.len(), 2);
    for x in &s {
        assert_eq!(x.seconds.len(), 3);
        assert_eq!(x.cpu_seconds.len(), 3);
        assert!(x.median_cpu_s() > 0.0);
    }
    assert_eq!(s[1].buckets, 250);
}
